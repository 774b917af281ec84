"""Acceptance battery shared by ``copkit suite`` and the test suite.

Each check returns a :class:`CriterionResult` whose ``rows`` are written to a
per-check CSV. Rows and the ``detail`` string hold only deterministic numbers;
wall-clock times are printed but never written, so two runs of the battery
produce byte-identical files.
"""
from __future__ import annotations

import filecmp
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import (divergence_example, episodic_instance, gridworld, random_ergodic, reversible_instance,
                   suite)
from .errors import BoundViolated, PreconditionViolated
from .harness import ExperimentConfig, run_study, write_csv
from .learning import (LinearValueModel, StepSchedule, TransitionBatch, TransitionSample, learn_ratio_tabular,
                       normalization_grad_estimate, reweighted_td_step, sample_batch)
from .mdp import (discounted_reset_chain, episodic_visitation, induce_chain, ratio_of,
                  stationary_distribution, value_function)
from .operators import (FeatureMap, WeightedProjector, approximation_error_bound, concentration, contraction_check,
                        cop_apply, discounted_cop_apply, discounted_ratio, episodic_cop_apply,
                        projected_bellman_solution, projected_cop_iterate)
from .replay import ReplayBuffer
from .trainer import EpisodicTask, TrainerConfig, greedy_policy, make_agent, run_control, value_direction

SLOW = (7, 10)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    rows: list = field(default_factory=list, repr=False)
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] criterion {self.number:>2} {self.name}: {self.detail} ({self.seconds:.1f} s)"


def _dists(env):
    d_mu = stationary_distribution(induce_chain(env.mdp, env.behavior)).probs
    chain = induce_chain(env.mdp, env.target)
    return d_mu, chain


# ---------------------------------------------------------------------------


def criterion_1() -> CriterionResult:
    """Undiscounted COP iteration reaches C d_pi/d_mu on random 10-state chains."""
    t0 = time.perf_counter()
    rows, worst = [], 0.0
    for seed in range(20):
        env = random_ergodic(10, seed=seed)
        d_mu, chain = _dists(env)
        d_pi = stationary_distribution(chain).probs
        c0 = np.random.default_rng(seed).dirichlet(np.ones(10))
        C = float(d_mu @ c0)
        c = c0
        for _ in range(10_000):
            c = cop_apply(chain, d_mu, c)
        err = float(np.max(np.abs(c - C * d_pi / d_mu)))
        worst = max(worst, err)
        rows.append({"seed": seed, "C": C, "max_error": err})
    secs = time.perf_counter() - t0
    ok = worst < 1e-6 and secs < 10.0
    return CriterionResult(1, "cop_convergence", ok, f"worst error {worst:.3g} (< 1e-6, runtime < 10 s)", rows, secs)


def criterion_2() -> CriterionResult:
    """Discounted COP limit matches the closed form and the reset chain's
    stationary distribution."""
    t0 = time.perf_counter()
    rows, worst = [], 0.0
    for env in suite(5):
        d_mu, chain = _dists(env)
        for g in (0.3, 0.9, 0.99):
            c = np.ones_like(d_mu)
            for _ in range(10_000):
                c = discounted_cop_apply(chain, d_mu, c, g)
            closed = discounted_ratio(chain, d_mu, g)
            reset = stationary_distribution(discounted_reset_chain(chain, d_mu, g)).probs / d_mu
            e1 = float(np.max(np.abs(c - closed)))
            e2 = float(np.max(np.abs(c - reset)))
            worst = max(worst, e1, e2)
            rows.append({"env": env.name, "gamma_hat": g, "err_closed_form": e1, "err_reset_chain": e2})
    secs = time.perf_counter() - t0
    ok = worst < 1e-8 and secs < 10.0
    return CriterionResult(2, "discounted_fixed_point", ok, f"worst error {worst:.3g} (< 1e-8, runtime < 10 s)", rows, secs)


def criterion_3() -> CriterionResult:
    """Measured n-step contraction under the bound; K_n <= K; K = 1 on-policy."""
    t0 = time.perf_counter()
    rows, ok, notes = [], True, []
    for env in suite(5):
        d_mu, chain = _dists(env)
        d_pi = stationary_distribution(chain).probs
        for g in (0.5, 0.9, 0.99, 1.0):
            for n in (1, 2, 4):
                try:
                    r = contraction_check(chain, d_mu, g, n, 100, rng=np.random.default_rng([n, int(g * 100)]))
                    status = "ok"
                except BoundViolated as exc:
                    ok, status = False, "violated"
                    notes.append(str(exc))
                    continue
                rep = concentration(chain, d_mu, d_pi, n)
                k_ok = rep.k_n <= rep.k_bound + 1e-12
                ok &= k_ok
                rows.append({"env": env.name, "gamma_hat": g, "n": n, "measured": r.measured, "bound": r.bound,
                             "k_n": rep.k_n, "k": rep.k_bound, "status": status if k_ok else "k_n_above_k"})
        on = induce_chain(env.mdp, env.behavior)
        k_on = concentration(on, d_mu, d_mu, 1).k_bound
        ok &= k_on == 1.0
        rows.append({"env": env.name, "gamma_hat": float("nan"), "n": 0, "measured": float("nan"),
                     "bound": float("nan"), "k_n": float("nan"), "k": k_on, "status": "on_policy"})
    secs = time.perf_counter() - t0
    worst = max(r["measured"] / r["bound"] for r in rows if r["n"] > 0 and r["bound"] > 0)
    detail = f"max measured/bound {worst:.4f}; K_n <= K everywhere; K = 1 when pi = mu"
    return CriterionResult(3, "contraction_bound", ok, detail if ok else "; ".join(notes) or detail, rows, secs)


def criterion_4() -> CriterionResult:
    """Approximation-error bound on 20 instances meeting the norm condition,
    and at least one generated instance that violates it."""
    t0 = time.perf_counter()
    rows, passed, violated, seed = [], 0, 0, 0
    ok = True
    while passed < 20 and seed < 200:
        seed += 1
        rng = np.random.default_rng(1000 + seed)
        env = random_ergodic(6, 2, seed=seed, gamma=0.9)
        chain = induce_chain(env.mdp, env.target)
        d_pi = stationary_distribution(chain).probs
        proj = WeightedProjector(FeatureMap(rng.normal(size=(6, 2))), rng.dirichlet(np.full(6, 0.5)))
        try:
            r = approximation_error_bound(chain, 0.9, proj, d_pi, value_function(chain, 0.9))
        except PreconditionViolated as exc:
            violated += 1
            rows.append({"seed": seed, "operator_norm": exc.norm, "actual": float("nan"), "bound": float("nan"),
                         "status": "precondition_violated"})
            continue
        except BoundViolated:
            ok = False
            rows.append({"seed": seed, "status": "bound_violated"})
            continue
        passed += 1
        rows.append({"seed": seed, "operator_norm": r.operator_norm, "actual": r.actual, "bound": r.bound, "status": "ok"})
    ok = ok and passed == 20 and violated >= 1
    secs = time.perf_counter() - t0
    return CriterionResult(4, "approximation_bound", ok,
                           f"{passed} instances within bound, {violated} precondition violation(s)", rows, secs)


def normalization_gradient_trial(seed: int, n_batches: int = 1_000_000, m: int = 8, check: int = 2000):
    """Mean of the leave-one-out gradient estimate over ``n_batches`` batches
    for a fixed 4-state tabular model, with per-coordinate standard errors and
    the analytic gradient ``(d^T c - 1) d``."""
    rng = np.random.default_rng(seed)
    d = np.array([0.1, 0.2, 0.3, 0.4])
    c = np.array([1.7, 0.4, 1.1, 0.9])

    class Tabular:
        def values(self, s):
            return c[s]

        def grads(self, s):
            return np.eye(4)[s]

    states = rng.choice(4, size=(n_batches, m), p=d)
    cv = c[states]
    loo = (cv.sum(axis=1, keepdims=True) - cv) / (m - 1) - 1.0
    est = np.zeros((n_batches, 4))
    for k in range(4):
        est[:, k] = (loo * (states == k)).sum(axis=1) / m
    # the vectorized estimate must coincide with the library estimator
    model = Tabular()
    agree = max(float(np.max(np.abs(normalization_grad_estimate(model, states[i]) - est[i]))) for i in range(check))
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / np.sqrt(n_batches)
    analytic = (d @ c - 1.0) * d
    return mean, se, analytic, agree


def criterion_5() -> CriterionResult:
    t0 = time.perf_counter()
    rows, ok = [], True
    for seed in (0, 1):
        mean, se, analytic, agree = normalization_gradient_trial(seed)
        z = np.abs(mean - analytic) / se
        ok &= bool(np.all(z < 3.0)) and agree < 1e-12
        for k in range(4):
            rows.append({"seed": seed, "coord": k, "mean": mean[k], "analytic": analytic[k], "std_err": se[k], "z": z[k]})
    secs = time.perf_counter() - t0
    zmax = max(r["z"] for r in rows)
    return CriterionResult(5, "normalization_unbiased", ok, f"max |z| = {zmax:.3f} over 2 seeds x 4 coords (< 3)", rows, secs)


def criterion_6() -> CriterionResult:
    """Projected COP without normalization collapses or blows up when the
    ratio is outside the feature span; it never settles on a nonzero point."""
    t0 = time.perf_counter()
    rows, ok = [], True
    for seed in range(5):
        inst = reversible_instance(seed)
        proj = WeightedProjector.euclidean(FeatureMap(inst.features))
        out = projected_cop_iterate(inst.chain, inst.d_mu, proj, np.ones(len(inst.d_mu)), 100_000)
        ok &= out.outcome in ("converged_to_zero", "diverged")
        rows.append({"seed": seed, "outcome": out.outcome, "steps": out.steps,
                     "final_max_abs": float(np.max(np.abs(out.final)))})
    secs = time.perf_counter() - t0
    outcomes = sorted({r["outcome"] for r in rows})
    return CriterionResult(6, "projected_cop_collapse", ok, f"outcomes: {', '.join(outcomes)}", rows, secs)


def _learning_arm(gamma_hat: float):
    rows, worst = [], 0.0
    for env in suite(5):
        d_mu, chain = _dists(env)
        if gamma_hat < 1.0:
            ref, renorm = discounted_ratio(chain, d_mu, gamma_hat), None
        else:
            ref, renorm = ratio_of(stationary_distribution(chain), d_mu).values, 1000
        for seed in range(3):
            run = learn_ratio_tabular(env.mdp, env.behavior, env.target, d_mu, gamma_hat, 1_000_000,
                                      np.random.default_rng(seed), schedule=StepSchedule(), renormalize_every=renorm)
            err = float(np.max(np.abs(run.c - ref)))
            worst = max(worst, err)
            rows.append({"gamma_hat": gamma_hat, "env": env.name, "seed": seed, "max_error": err, "status": run.status})
    return rows, worst


def criterion_7() -> CriterionResult:
    rows, details, ok = [], [], True
    total = 0.0
    for g in (0.9, 1.0):
        t0 = time.perf_counter()
        r, worst = _learning_arm(g)
        secs = time.perf_counter() - t0
        total += secs
        ok &= worst < 0.05 and secs < 120.0
        rows.extend(r)
        details.append(f"gamma_hat={g:g} worst {worst:.4f}")
    return CriterionResult(7, "stochastic_cop_td", ok, "; ".join(details) + " (< 0.05, < 2 min per arm)", rows, total)


def divergence_demo(steps: int = 10_000, alpha: float = 0.01, seed: int = 0, theta0: float = 1.0):
    """Sample-based uncorrected TD on the two-state example and the exact
    expected update of the ratio-reweighted rule.

    Returns ``(growth, theta_corrected, theta_star, theta_sampled)``: the
    norm growth factor of uncorrected TD, the limit of the expected corrected
    update, the projected fixed point under ``d_pi``, and the final weight of
    a sample-based corrected run (reported, not asserted).
    """
    env = divergence_example()
    gamma = env.mdp.discount
    d_mu, chain = _dists(env)
    d_pi = stationary_distribution(chain).probs
    ratio = d_pi / d_mu
    fm = FeatureMap(env.features)
    rng = np.random.default_rng(seed)

    batch = sample_batch(env.mdp, env.behavior, env.target, d_mu, rng, steps)
    model = LinearValueModel(fm, [theta0])
    for i in range(steps):
        # uncorrected: action ratio only, states still drawn from d_mu
        model.weights = reweighted_td_step(model, batch[i], 1.0, gamma, alpha)
    growth = float(np.linalg.norm(model.weights) / abs(theta0))

    # exact expected update of the reweighted rule, by enumeration
    P, mu = env.mdp.transition, env.behavior.probs
    samples, weights = [], []
    for s in range(2):
        for a in range(2):
            for sp in range(2):
                w = d_mu[s] * mu[s, a] * P[s, a, sp]
                if w > 0:
                    samples.append(TransitionSample(s, a, sp, float(env.mdp.reward[s, a]), float(mu[s, a]),
                                                    float(env.target.probs[s, a])))
                    weights.append(w)
    weights = np.asarray(weights)
    theta = np.array([theta0])
    for _ in range(steps):
        m = LinearValueModel(fm, theta)
        inc = sum(w * (reweighted_td_step(m, smp, ratio[smp.state], gamma, 0.05) - theta)
                  for w, smp in zip(weights, samples))
        theta = theta + inc
    v_star = projected_bellman_solution(chain, gamma, WeightedProjector(fm, d_pi))
    theta_star = float(np.linalg.lstsq(env.features, v_star, rcond=None)[0][0])

    sampled = LinearValueModel(fm, [theta0])
    sched = StepSchedule(alpha0=0.05, t0=1e4)
    big = sample_batch(env.mdp, env.behavior, env.target, d_mu, rng, 100_000)
    for i in range(len(big)):
        sampled.weights = reweighted_td_step(sampled, big[i], ratio[big.state[i]], gamma, sched(i))
    return growth, float(theta[0]), theta_star, float(sampled.weights[0])


def criterion_8() -> CriterionResult:
    t0 = time.perf_counter()
    growth, th, th_star, th_sampled = divergence_demo()
    err = abs(th - th_star)
    ok = growth > 10.0 and err < 1e-3
    rows = [{"uncorrected_growth": growth, "corrected_theta": th, "projected_fixed_point": th_star,
             "corrected_error": err, "sampled_corrected_theta": th_sampled}]
    detail = (f"uncorrected growth x{growth:.3g} (> 10); corrected |theta - theta*| = {err:.2g} (< 1e-3); "
              f"sample-based corrected theta {th_sampled:.3f} vs {th_star:.3f}")
    return CriterionResult(8, "divergence_demo", ok, detail, rows, time.perf_counter() - t0)


def sumtree_frequencies(seed: int = 0, n_draws: int = 100_000, batch: int = 1000):
    """Empirical slot frequencies of prioritized sampling and their z-scores."""
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(8)
    for s in range(8):
        buf.push(TransitionSample(s, 0, 0, 0.0, 1.0, 1.0))
    buf.set_priorities(np.arange(8), [0.0, 0.5, 1.0, 2.0, 3.5, 0.25, 4.0, 1.75])
    p = buf.probabilities()
    counts = np.zeros(8)
    for _ in range(n_draws // batch):
        _, slots = buf.sample_prioritized(batch, rng)
        counts += np.bincount(slots, minlength=8)
    sigma = np.sqrt(n_draws * p * (1.0 - p))
    z = np.where(sigma > 0, np.abs(counts - n_draws * p) / np.where(sigma > 0, sigma, 1.0), np.abs(counts))
    return p, counts, z


def reweighting_equivalence(seed: int = 0, n_states: int = 4, epsilon: float = 0.1) -> float:
    """Largest gap between the prioritized expected value update (buffer
    holding every transition with multiplicity ``d_mu mu P``, priorities equal
    to the exact ratio) and the ``d_pi``-weighted expected update."""
    env = random_ergodic(n_states, 2, seed=seed)
    rng = np.random.default_rng(seed)
    P, mu = env.mdp.transition, env.behavior.probs
    cfg = TrainerConfig(epsilon=epsilon, buffer_capacity=n_states * 2 * n_states)
    agent = make_agent(n_states, 2, mu, env.mdp.discount, cfg)
    agent.params.value_weights = rng.normal(size=agent.params.value_weights.shape)
    agent.params.target_value_weights = rng.normal(size=agent.params.value_weights.shape)
    pi = greedy_policy(agent.q(target=True), epsilon)
    d_mu = stationary_distribution(induce_chain(env.mdp, env.behavior)).probs
    d_pi = stationary_distribution(induce_chain(env.mdp, pi)).probs
    ratio = d_pi / d_mu

    mult, oracle_w = [], []
    for s in range(n_states):
        for a in range(2):
            for sp in range(n_states):
                agent.buffer.push(TransitionSample(s, a, sp, float(env.mdp.reward[s, a]), float(mu[s, a]),
                                                   float(pi.probs[s, a])))
                mult.append(d_mu[s] * mu[s, a] * P[s, a, sp])
                oracle_w.append(d_pi[s] * mu[s, a] * P[s, a, sp])
    slots = np.arange(len(agent.buffer))
    agent.buffer.set_priorities(slots, ratio[agent.buffer.state[slots]])
    batch = agent.buffer.batch(slots)
    dirs = value_direction(agent, batch, np.zeros(len(slots), dtype=bool))
    q = np.asarray(mult) * agent.buffer.probabilities()
    prioritized = np.tensordot(q / q.sum(), dirs, axes=1)
    oracle = np.tensordot(np.asarray(oracle_w), dirs, axes=1)
    return float(np.max(np.abs(prioritized - oracle)))


def criterion_9() -> CriterionResult:
    t0 = time.perf_counter()
    p, counts, z = sumtree_frequencies()
    gap = reweighting_equivalence()
    ok = bool(np.all(z <= 3.0)) and gap < 1e-12
    rows = [{"slot": i, "probability": p[i], "count": counts[i], "z": z[i]} for i in range(len(p))]
    rows.append({"slot": -1, "probability": float("nan"), "count": float("nan"), "z": gap})
    detail = f"max frequency |z| = {z.max():.3f} (<= 3); reweighting gap {gap:.2g} (< 1e-12)"
    return CriterionResult(9, "replay_correctness", ok, detail, rows, time.perf_counter() - t0)


def control_comparison(seeds=(0, 1, 2), steps: int = 200_000, parallel: int = 1, **overrides):
    env = gridworld()
    task = EpisodicTask(env.mdp, env.info["start"], env.info["goal"])
    jobs = []
    for seed in seeds:
        for arm, mode, learn in (("corrected", "ratio", True), ("uniform", "uniform", False)):
            cfg = TrainerConfig(gamma_hat=0.99, eta=0.02, steps=steps, priority_mode=mode, learn_ratio=learn, **overrides)
            jobs.append((arm, seed, task, env.behavior, cfg))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            runs = list(pool.map(_control_job, jobs))
    else:
        runs = [_control_job(j) for j in jobs]
    return {(arm, seed): run for (arm, seed, *_), run in zip(jobs, runs)}


def _control_job(job):
    arm, seed, task, behavior, cfg = job
    run = run_control(task, behavior, cfg, seed)
    return run.rows, run.status


def criterion_10(parallel: int = 1) -> CriterionResult:
    t0 = time.perf_counter()
    runs = control_comparison(parallel=parallel)
    rows, wins = [], 0
    for seed in (0, 1, 2):
        means = {}
        for arm in ("corrected", "uniform"):
            r, status = runs[(arm, seed)]
            means[arm] = float(np.mean([x["eval_return"] for x in r])) if r else float("nan")
            rows.append({"arm": arm, "seed": seed, "mean_eval_return": means[arm],
                         "final_eval_return": r[-1]["eval_return"] if r else float("nan"),
                         "final_mean_c_eval": r[-1]["mean_c_eval"] if r else float("nan"), "status": status})
        wins += means["corrected"] > means["uniform"]
    secs = time.perf_counter() - t0
    ok = wins >= 2 and secs < 600.0
    diffs = [rows[2 * i]["mean_eval_return"] - rows[2 * i + 1]["mean_eval_return"] for i in range(3)]
    detail = f"corrected wins {wins}/3 seeds (need >= 2); mean-return differences " + ", ".join(f"{d:+.2e}" for d in diffs)
    return CriterionResult(10, "control_analogue", ok, detail, rows, secs)


def criterion_11() -> CriterionResult:
    t0 = time.perf_counter()
    rows, ok = [], True
    for seed in range(3):
        inst = episodic_instance(5, seed=seed)
        emdp = inst.mdp
        vm = episodic_visitation(emdp, inst.behavior)
        vp = episodic_visitation(emdp, inst.target)
        resid = 0.0
        for pol, v in ((inst.behavior, vm), (inst.target, vp)):
            P = induce_chain(emdp, pol).transition
            resid = max(resid, float(np.max(np.abs(v - P.T @ v - emdp.start_distribution))))
        c = np.ones(emdp.n_states)
        pinned = True
        for _ in range(2000):
            c = episodic_cop_apply(emdp, inst.target, vm, c)
            pinned &= c[emdp.start_state] == 1.0
        err = float(np.max(np.abs(c - vp / vm)))
        ok &= resid < 1e-10 and err < 1e-9 and pinned
        rows.append({"seed": seed, "visitation_residual": resid, "fixed_point_error": err, "start_pinned": pinned})
    worst_r = max(r["visitation_residual"] for r in rows)
    worst_e = max(r["fixed_point_error"] for r in rows)
    detail = f"visitation residual {worst_r:.2g} (< 1e-10); fixed-point error {worst_e:.2g} (< 1e-9); c(s0) pinned"
    return CriterionResult(11, "episodic", ok, detail, rows, time.perf_counter() - t0)


QUICK = (1, 2, 3, 4, 6, 8, 9, 11)


def _studies(out: Path) -> None:
    """Small runs of every study type, so determinism covers the harness too."""
    configs = {
        "operator": {"study": "operator", "env": {"kind": "chain", "params": {"n_states": 5}},
                     "algorithm": {"gamma_hats": [0.0, 0.5, 0.9]}, "budget": {"steps": 200, "seeds": [0, 1]}},
        "learning": {"study": "learning", "env": {"kind": "random_ergodic", "params": {"n_states": 5}},
                     "algorithm": {"gamma_hats": [0.9, 1.0], "record_every": 5000}, "budget": {"steps": 20_000, "seeds": [0, 1]}},
        "control": {"study": "control", "env": {"kind": "gridworld", "params": {"rows": 3, "cols": 3}},
                    "algorithm": {"arms": ["corrected", "td_priority", "ratio_aux", "uniform"],
                                  "trainer": {"learning_starts": 100, "eval_every": 500}},
                    "budget": {"steps": 2000, "seeds": [0]}},
    }
    for name, doc in configs.items():
        run_study(ExperimentConfig.from_dict(doc), out / f"study_{name}")


def criterion_12() -> CriterionResult:
    """Quick battery plus small studies, run twice; every file must match."""
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        dirs = [Path(tmp) / "a", Path(tmp) / "b"]
        for d in dirs:
            run_battery(d, only=QUICK, write_only=True)
            _studies(d)
        files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
        other = sorted(p.relative_to(dirs[1]) for p in dirs[1].rglob("*") if p.is_file())
        same = files == other and all(filecmp.cmp(dirs[0] / f, dirs[1] / f, shallow=False) for f in files)
    rows = [{"files_compared": len(files), "identical": same}]
    return CriterionResult(12, "determinism", same, f"{len(files)} files byte-identical across two runs" if same
                           else "outputs differ between runs", rows, time.perf_counter() - t0)


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10, 11: criterion_11, 12: criterion_12}


def run_criterion(n: int, parallel: int = 1) -> CriterionResult:
    if n == 10:
        return criterion_10(parallel=parallel)
    return CRITERIA[n]()


def _write(out: Path, result: CriterionResult) -> None:
    if result.rows:
        cols = list(dict.fromkeys(k for row in result.rows for k in row))
        write_csv(out / f"criterion_{result.number:02d}.csv", cols, result.rows)


def run_battery(out_dir, only=None, skip_slow: bool = False, parallel: int = 1, write_only: bool = False,
                echo=None) -> list[CriterionResult]:
    """Run the selected checks, writing one CSV per check and ``results.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    numbers = sorted(only) if only else sorted(CRITERIA)
    if skip_slow:
        numbers = [n for n in numbers if n not in SLOW]
    if write_only:
        numbers = [n for n in numbers if n != 12]
    results = []
    for n in numbers:
        r = run_criterion(n, parallel)
        _write(out, r)
        results.append(r)
        if echo:
            echo(r.line())
    write_csv(out / "results.csv", ("criterion", "name", "passed", "detail"),
              [{"criterion": r.number, "name": r.name, "passed": r.passed, "detail": r.detail} for r in results])
    return results


