"""Experiment driver: strict JSON configs, three study types, CSV output.

Every study is a pure function of its config and seeds. Cells (one per
``(gamma_hat, seed)`` or ``(arm, seed)``) are independent and may run in
worker processes; their rows are merged in config order, so serial and
parallel runs write byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .envs import KINDS, EnvInstance, generate_env
from .errors import ConfigError, CopkitError, InvalidSpec, LowCoverage, StudyFailed
from .learning import StepSchedule, learn_ratio_tabular
from .mdp import EpisodicMdp, induce_chain, ratio_of, stationary_distribution
from .operators import contraction_check, discounted_cop_apply, discounted_ratio, iterate_operator
from .trainer import EpisodicTask, TrainerConfig, run_control

log = logging.getLogger(__name__)

STUDIES = ("operator", "learning", "control")

# priority mode, learn_ratio
ARMS = {
    "corrected": ("ratio", True),
    "td_priority": ("td_error", False),
    "ratio_aux": ("uniform", True),
    "uniform": ("uniform", False),
}

OPERATOR_COLUMNS = ("gamma_hat", "seed", "step", "residual", "distance", "max_entry", "status")
CONTRACTION_COLUMNS = ("gamma_hat", "seed", "n", "measured", "bound", "k_n", "status")
LEARNING_COLUMNS = ("gamma_hat", "seed", "step", "max_error", "weighted_error", "loss", "status")
CONTROL_COLUMNS = ("arm", "seed", "step", "eval_return", "mean_c_eval", "ratio_loss", "value_loss",
                   "mean_priority", "status")


def _strict(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class EnvSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown environment kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "json_file":
            path = self.params.get("path")
            if path is None or not Path(path).is_file():
                raise ConfigError(f"environment file {path!r} does not exist")

    def build(self) -> EnvInstance:
        return generate_env(self.kind, self.params, self.seed)


@dataclass
class AlgorithmSpec:
    gamma_hats: list = field(default_factory=lambda: [0.9])
    eta: float = 0.02
    normalization_weight: float = 0.0
    schedule: dict = field(default_factory=dict)
    renormalize_every: int = 1000
    record_every: int = 10_000
    n_values: list = field(default_factory=lambda: [1, 2, 4])
    trials: int = 100
    arms: list = field(default_factory=lambda: ["corrected", "uniform"])
    trainer: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.gamma_hats or any(not 0.0 <= g <= 1.0 for g in self.gamma_hats):
            raise ConfigError("gamma_hats must be a nonempty list of values in [0, 1]")
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ConfigError(f"unknown arm(s) {bad}; expected a subset of {sorted(ARMS)}")
        if self.record_every < 1 or self.renormalize_every < 1 or self.trials < 1:
            raise ConfigError("record_every, renormalize_every and trials must be >= 1")
        try:
            self.step_schedule()
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from exc

    def step_schedule(self) -> StepSchedule:
        unknown = set(self.schedule) - {"kind", "alpha0", "t0"}
        if unknown:
            raise ConfigError(f"unknown key(s) in algorithm.schedule: {', '.join(sorted(unknown))}")
        return StepSchedule(**self.schedule)


@dataclass
class Budget:
    steps: int = 10_000
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("budget.steps must be >= 0")
        if not self.seeds:
            raise ConfigError("budget.seeds must be nonempty")


@dataclass
class ExperimentConfig:
    study: str
    env: EnvSpec
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    budget: Budget = field(default_factory=Budget)
    output: str = "results"
    coverage_threshold: float | None = None  # minimum n_states * d_mu(s); None disables the check

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) in config: {', '.join(unknown)}")
        for required in ("study", "env"):
            if required not in doc:
                raise ConfigError(f"missing required key {required!r}")
        if doc["study"] not in STUDIES:
            raise ConfigError(f"study must be one of {STUDIES}, got {doc['study']!r}")
        cfg = cls(
            study=doc["study"],
            env=_strict(EnvSpec, doc["env"], "env"),
            algorithm=_strict(AlgorithmSpec, doc.get("algorithm", {}), "algorithm"),
            budget=_strict(Budget, doc.get("budget", {}), "budget"),
            output=doc.get("output", "results"),
            coverage_threshold=doc.get("coverage_threshold"),
        )
        if cfg.study == "control":
            _trainer_config(cfg, "corrected", 0)  # surface trainer-key errors at parse time
            if cfg.env.kind != "gridworld":
                raise ConfigError("control studies need a gridworld environment")
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {str(p)!r} does not exist")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)


def seed_offset() -> int:
    raw = os.environ.get("COPKIT_SEED_OFFSET", "0")
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"COPKIT_SEED_OFFSET must be an integer, got {raw!r}") from exc


def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c, float("nan"))) for c in columns])
    Path(path).write_text(buf.getvalue())


def _trainer_config(cfg: ExperimentConfig, arm: str, steps: int) -> TrainerConfig:
    mode, learn = ARMS[arm]
    doc = {"eta": cfg.algorithm.eta, "normalization_weight": cfg.algorithm.normalization_weight}
    doc.update(cfg.algorithm.trainer)
    doc.update(priority_mode=mode, learn_ratio=learn, steps=steps)
    return TrainerConfig.from_dict(doc)


def check_coverage(env: EnvInstance, threshold: float | None) -> None:
    if threshold is None or isinstance(env.mdp, EpisodicMdp):
        return
    d_mu = stationary_distribution(induce_chain(env.mdp, env.behavior)).probs
    worst = float(d_mu.min() * len(d_mu))
    if worst < threshold:
        raise LowCoverage(f"behavior coverage {worst:.4g} is below the threshold {threshold}")


# ---------------------------------------------------------------------------
# Cells. Each returns a dict of table name -> list of rows.


def _operator_cell(cfg: ExperimentConfig, gamma_hat: float, seed: int) -> dict:
    env = cfg.env.build()
    d_mu = stationary_distribution(induce_chain(env.mdp, env.behavior)).probs
    chain = induce_chain(env.mdp, env.target)
    rng = np.random.default_rng(seed)
    c0 = rng.exponential(size=len(d_mu))
    c0 /= d_mu @ c0
    base = {"gamma_hat": gamma_hat, "seed": seed}
    fixed = discounted_ratio(chain, d_mu, gamma_hat) if gamma_hat < 1.0 else None
    res = []
    if cfg.budget.steps > 0:
        traj = iterate_operator(lambda c: discounted_cop_apply(chain, d_mu, c, gamma_hat), c0, cfg.budget.steps,
                                record_every=cfg.budget.steps, weights=d_mu, fixed_point=fixed,
                                raise_on_divergence=False)
        res = [{**base, **row, "status": traj.status} for row in traj.rows()]
    con = []
    for n in cfg.algorithm.n_values:
        r = contraction_check(chain, d_mu, gamma_hat, int(n), cfg.algorithm.trials, rng=np.random.default_rng([seed, n]))
        con.append({**base, "n": int(n), "measured": r.measured, "bound": r.bound, "k_n": r.k_n, "status": "ok"})
    return {"residuals": res, "contraction": con}


def _learning_cell(cfg: ExperimentConfig, gamma_hat: float, seed: int) -> dict:
    env = cfg.env.build()
    d_mu = stationary_distribution(induce_chain(env.mdp, env.behavior)).probs
    chain = induce_chain(env.mdp, env.target)
    if gamma_hat < 1.0:
        ref = discounted_ratio(chain, d_mu, gamma_hat)
        renorm = None
    else:
        ref = ratio_of(stationary_distribution(chain), d_mu).values
        renorm = cfg.algorithm.renormalize_every
    run = learn_ratio_tabular(env.mdp, env.behavior, env.target, d_mu, gamma_hat, cfg.budget.steps,
                              np.random.default_rng(seed), schedule=cfg.algorithm.step_schedule(),
                              renormalize_every=renorm, reference=ref, record_every=cfg.algorithm.record_every)
    rows = [{"gamma_hat": gamma_hat, "seed": seed, "step": t, "max_error": m, "weighted_error": w,
             "loss": loss, "status": run.status} for t, m, w, loss in run.rows]
    return {"learning": rows}


def _control_cell(cfg: ExperimentConfig, arm: str, seed: int) -> dict:
    env = cfg.env.build()
    task = EpisodicTask(env.mdp, env.info["start"], env.info["goal"])
    run = run_control(task, env.behavior, _trainer_config(cfg, arm, cfg.budget.steps), seed)
    return {"control": [{"arm": arm, **row, "status": run.status} for row in run.rows]}


_CELLS = {"operator": _operator_cell, "learning": _learning_cell, "control": _control_cell}
_TABLES = {
    "operator": {"residuals": OPERATOR_COLUMNS, "contraction": CONTRACTION_COLUMNS},
    "learning": {"learning": LEARNING_COLUMNS},
    "control": {"control": CONTROL_COLUMNS},
}


def _run_cell(args):
    cfg, key, seed = args
    try:
        return _CELLS[cfg.study](cfg, key, seed), None
    except CopkitError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def cells(cfg: ExperimentConfig) -> list[tuple]:
    off = seed_offset()
    keys = cfg.algorithm.arms if cfg.study == "control" else cfg.algorithm.gamma_hats
    return [(k, int(s) + off) for k in keys for s in cfg.budget.seeds]


def run_study(cfg: ExperimentConfig, out_dir=None, parallel: int = 1) -> dict[str, Path]:
    """Run every cell and write one CSV per table plus ``summary.json``.

    Failed cells contribute a marker row with status ``failed``; after all
    files are written ``StudyFailed`` is raised.
    """
    out = Path(out_dir if out_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    check_coverage(cfg.env.build(), cfg.coverage_threshold)
    todo = cells(cfg)
    jobs = [(cfg, k, s) for k, s in todo]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]

    tables = _TABLES[cfg.study]
    merged = {name: [] for name in tables}
    failures = []
    key_col = "arm" if cfg.study == "control" else "gamma_hat"
    for (k, s), (rows, err) in zip(todo, results):
        if err is not None:
            log.error("cell %s=%s seed=%s failed: %s", key_col, k, s, err)
            failures.append({key_col: k, "seed": s, "error": err})
            for name in tables:
                merged[name].append({key_col: k, "seed": s, "status": "failed"})
            continue
        for name in tables:
            merged[name].extend(rows[name])

    paths = {}
    for name, cols in tables.items():
        paths[name] = out / f"{name}.csv"
        write_csv(paths[name], cols, merged[name])
    summary = {
        "study": cfg.study,
        "cells": [{key_col: k, "seed": s} for k, s in todo],
        "failures": failures,
        "config": cfg.to_dict(),
    }
    paths["summary"] = out / "summary.json"
    paths["summary"].write_text(json.dumps(summary, indent=1, sort_keys=True, default=str) + "\n")
    if failures:
        raise StudyFailed(f"{len(failures)} of {len(todo)} cells failed; see {paths['summary']}")
    return paths


# ---------------------------------------------------------------------------
# Environment names used by `describe`


def parse_env_name(name: str) -> tuple[str, dict]:
    """``chain5`` / ``random_ergodic10`` / ``gridworld5x5`` / ``episodic_chain5``
    / ``divergence_example`` to ``(kind, params)``."""
    import re

    if name == "divergence_example":
        return name, {}
    m = re.fullmatch(r"gridworld(\d+)x(\d+)", name)
    if m:
        return "gridworld", {"rows": int(m.group(1)), "cols": int(m.group(2))}
    for kind in ("random_ergodic", "episodic_chain", "chain"):
        m = re.fullmatch(kind + r"(\d+)", name)
        if m:
            return kind, {"n_states": int(m.group(1))}
    raise InvalidSpec(f"cannot parse environment name {name!r}")


def describe(name: str, gamma_hats=(0.9,), seed: int = 0, n_values=(1, 2, 4)) -> dict:
    """Stationary distributions, discounted-reset distributions and
    concentration coefficients for an environment's policy pair."""
    from .mdp import discounted_stationary, episodic_visitation
    from .operators import concentration

    kind, params = parse_env_name(name)
    env = generate_env(kind, params, seed)
    if isinstance(env.mdp, EpisodicMdp):
        vm = episodic_visitation(env.mdp, env.behavior)
        vp = episodic_visitation(env.mdp, env.target)
        return {"env": env.name, "visitation_mu": vm.tolist(), "visitation_pi": vp.tolist(),
                "ratio": (vp / vm).tolist()}
    d_mu = stationary_distribution(induce_chain(env.mdp, env.behavior)).probs
    chain = induce_chain(env.mdp, env.target)
    d_pi = stationary_distribution(chain).probs
    out = {"env": env.name, "d_mu": d_mu.tolist(), "d_pi": d_pi.tolist(), "d_hat_pi": {}, "K": {}}
    for g in gamma_hats:
        dist = d_pi if g == 1.0 else discounted_stationary(chain, d_mu, g).probs
        out["d_hat_pi"][str(float(g))] = np.asarray(dist).tolist()
    for n in n_values:
        rep = concentration(chain, d_mu, d_pi, n)
        out["K"][str(n)] = {"k_n": rep.k_n, "safe_gamma": rep.safe_gamma}
    out["K_bound"] = concentration(chain, d_mu, d_pi, 1).k_bound
    return out


def is_finite_row(row: dict, cols) -> bool:
    return all(not isinstance(row[c], float) or math.isfinite(row[c]) for c in cols if c in row)
