from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from copkit import harness
from copkit.cli import main
from copkit.errors import ConfigError, LowCoverage, StudyFailed
from copkit.harness import ExperimentConfig, describe, run_study
from copkit.mdp import discounted_stationary, induce_chain, stationary_distribution


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_cfg(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


OPERATOR = {
    "study": "operator",
    "env": {"kind": "chain", "params": {"n_states": 5}},
    "algorithm": {"gamma_hats": [0.0, 0.5, 0.9], "record_every": 1, "n_values": [1, 2]},
    "budget": {"steps": 30, "seeds": [0]},
}

LEARNING = {
    "study": "learning",
    "env": {"kind": "random_ergodic", "params": {"n_states": 4, "n_actions": 2}, "seed": 3},
    "algorithm": {"gamma_hats": [0.9, 1.0], "record_every": 500, "renormalize_every": 100},
    "budget": {"steps": 2000, "seeds": [0, 1]},
}


def test_operator_study_residuals_monotone(tmp_path):
    paths = run_study(ExperimentConfig.from_dict(OPERATOR), tmp_path)
    rows = read_rows(paths["residuals"])
    series = {}
    for r in rows:
        series.setdefault(float(r["gamma_hat"]), []).append(float(r["residual"]))
    assert sorted(series) == [0.0, 0.5, 0.9]
    for g, res in series.items():
        res = np.array(res)
        assert np.all(np.diff(res[1:]) <= 1e-12), g
    contraction = read_rows(paths["contraction"])
    assert {r["status"] for r in contraction} <= {"ok", "violated"}
    assert all(r["status"] == "ok" for r in contraction)


def test_learning_zero_steps_is_header_only(tmp_path):
    doc = dict(LEARNING, budget={"steps": 0, "seeds": [0]})
    paths = run_study(ExperimentConfig.from_dict(doc), tmp_path)
    lines = paths["learning"].read_text().splitlines()
    assert lines == [",".join(harness.LEARNING_COLUMNS)]


def test_identical_runs_are_byte_identical(tmp_path):
    cfg = ExperimentConfig.from_dict(LEARNING)
    a = run_study(cfg, tmp_path / "a")
    b = run_study(cfg, tmp_path / "b")
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes(), name


def test_parallel_matches_serial(tmp_path):
    cfg = ExperimentConfig.from_dict(LEARNING)
    a = run_study(cfg, tmp_path / "serial")
    b = run_study(cfg, tmp_path / "parallel", parallel=2)
    assert a["learning"].read_bytes() == b["learning"].read_bytes()


def test_seed_offset_shifts_seeds(tmp_path, monkeypatch):
    cfg = ExperimentConfig.from_dict(LEARNING)
    monkeypatch.setenv("COPKIT_SEED_OFFSET", "10")
    rows = read_rows(run_study(cfg, tmp_path)["learning"])
    assert {r["seed"] for r in rows} == {"10", "11"}
    monkeypatch.setenv("COPKIT_SEED_OFFSET", "ten")
    with pytest.raises(ConfigError):
        harness.seed_offset()


def test_failed_cell_writes_marker_and_raises(tmp_path, monkeypatch):
    from copkit.errors import Diverged

    original = harness._CELLS["learning"]

    def flaky(cfg, key, seed):
        if key == 1.0:
            raise Diverged(7, 1e13)
        return original(cfg, key, seed)

    monkeypatch.setitem(harness._CELLS, "learning", flaky)
    with pytest.raises(StudyFailed):
        run_study(ExperimentConfig.from_dict(LEARNING), tmp_path)
    rows = read_rows(tmp_path / "learning.csv")
    failed = [r for r in rows if r["status"] == "failed"]
    assert [(r["gamma_hat"], r["seed"]) for r in failed] == [("1", "0"), ("1", "1")]
    assert any(r["status"] == "ok" for r in rows)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["failures"]) == 2


def test_control_study_four_arms(tmp_path):
    doc = {
        "study": "control",
        "env": {"kind": "gridworld", "params": {"rows": 3, "cols": 3}},
        "algorithm": {"arms": ["corrected", "td_priority", "ratio_aux", "uniform"],
                      "trainer": {"learning_starts": 100, "eval_every": 500, "sync_period": 100}},
        "budget": {"steps": 1000, "seeds": [0]},
    }
    rows = read_rows(run_study(ExperimentConfig.from_dict(doc), tmp_path)["control"])
    assert [r["arm"] for r in rows] == ["corrected"] * 2 + ["td_priority"] * 2 + ["ratio_aux"] * 2 + ["uniform"] * 2
    # arms without ratio learning keep the initial estimate c = 1
    np.testing.assert_allclose([float(r["mean_c_eval"]) for r in rows if r["arm"] in ("td_priority", "uniform")], 1.0, rtol=1e-12)


# --- config parsing -----------------------------------------------------------------------


@pytest.mark.parametrize("doc, key", [
    (dict(OPERATOR, extra=1), "extra"),
    (dict(OPERATOR, env={"kind": "chain", "size": 5}), "size"),
    (dict(OPERATOR, algorithm={"gamma": [0.5]}), "gamma"),
    (dict(OPERATOR, budget={"steps": 1, "seed": [0]}), "seed"),
    (dict(OPERATOR, algorithm={"schedule": {"alpha": 0.1}}), "alpha"),
])
def test_unknown_keys_rejected(doc, key):
    with pytest.raises(ConfigError, match=key):
        ExperimentConfig.from_dict(doc)


def test_missing_json_env_file():
    with pytest.raises(ConfigError, match="does not exist"):
        ExperimentConfig.from_dict({"study": "operator", "env": {"kind": "json_file", "params": {"path": "/nope.json"}}})


def test_control_requires_gridworld():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"study": "control", "env": {"kind": "chain"}})


def test_coverage_threshold(tmp_path):
    doc = dict(OPERATOR, coverage_threshold=100.0)
    with pytest.raises(LowCoverage):
        run_study(ExperimentConfig.from_dict(doc), tmp_path)


def test_csv_floats_round_trip(tmp_path):
    paths = run_study(ExperimentConfig.from_dict(OPERATOR), tmp_path)
    text = paths["residuals"].read_text().splitlines()[1]
    value = text.split(",")[3]
    assert float(value) == float(repr(float(value)))


# --- command line -------------------------------------------------------------------------


def test_cli_validate_unknown_key(tmp_path, capsys):
    p = write_cfg(tmp_path, dict(OPERATOR, bogus_key=3))
    assert main(["validate", str(p)]) == 1
    assert "bogus_key" in capsys.readouterr().err


def test_cli_validate_ok(tmp_path, capsys):
    p = write_cfg(tmp_path, OPERATOR)
    assert main(["validate", "--config", str(p)]) == 0
    assert "ok" in capsys.readouterr().out


def test_cli_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_cli_no_subcommand(capsys):
    assert main([]) == 1


def test_cli_run_writes_files(tmp_path, capsys):
    p = write_cfg(tmp_path, LEARNING)
    out = tmp_path / "out"
    assert main(["run", str(p), "--out-dir", str(out), "--seeds", "4-5"]) == 0
    rows = read_rows(out / "learning.csv")
    assert {r["seed"] for r in rows} == {"4", "5"}


def test_cli_run_study_failure_exit_2(tmp_path, monkeypatch):
    from copkit.errors import Diverged

    def broken(cfg, key, seed):
        raise Diverged(7, 1e13)

    monkeypatch.setitem(harness._CELLS, "learning", broken)
    p = write_cfg(tmp_path, LEARNING)
    assert main(["run", str(p), "--out-dir", str(tmp_path / "o")]) == 2


def test_cli_missing_config_file(tmp_path):
    assert main(["run", str(tmp_path / "absent.json")]) == 1


def test_cli_describe_matches_discounted_stationary(capsys):
    assert main(["describe", "chain5", "--gamma-hat", "0.9"]) == 0
    doc = json.loads(capsys.readouterr().out)
    from copkit.envs import chain

    env = chain(5)
    d_mu = stationary_distribution(induce_chain(env.mdp, env.behavior)).probs
    expected = discounted_stationary(induce_chain(env.mdp, env.target), d_mu, 0.9).probs
    np.testing.assert_allclose(doc["d_hat_pi"]["0.9"], expected, atol=1e-14)
    np.testing.assert_allclose(doc["d_mu"], d_mu, atol=1e-14)
    assert set(doc["K"]) == {"1", "2", "4"}


def test_describe_other_envs():
    assert "ratio" in describe("episodic_chain5")
    assert len(describe("gridworld2x3")["d_mu"]) == 6
    assert len(describe("random_ergodic7", gamma_hats=[0.5, 1.0])["d_hat_pi"]) == 2


def test_cli_describe_bad_name():
    assert main(["describe", "torus9"]) == 1


def test_cli_suite_failure_exit_3(tmp_path, monkeypatch):
    from copkit import acceptance

    monkeypatch.setitem(acceptance.CRITERIA, 1, lambda: acceptance.CriterionResult(1, "forced", False, "x"))
    assert main(["suite", "--only", "1", "--out-dir", str(tmp_path)]) == 3
