"""Sample-based learning rules for values and state-distribution ratios."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import DimensionMismatch, Infeasible, InsufficientSamples, InvalidModel
from .mdp import EpisodicMdp, Mdp, Policy
from .operators import FeatureMap


# ---------------------------------------------------------------------------
# Samples


@dataclass(frozen=True, slots=True)
class TransitionSample:
    state: int
    action: int
    next_state: int
    reward: float
    behavior_prob: float
    target_prob: float
    is_initial: bool = False

    def __post_init__(self):
        if not 0.0 < self.behavior_prob <= 1.0:
            raise InvalidModel(f"behavior_prob must lie in (0, 1], got {self.behavior_prob}")
        if not 0.0 <= self.target_prob <= 1.0:
            raise InvalidModel(f"target_prob must lie in [0, 1], got {self.target_prob}")

    @property
    def rho(self) -> float:
        """Per-action importance ratio ``pi(a|s) / mu(a|s)``."""
        return self.target_prob / self.behavior_prob


@dataclass(frozen=True)
class TransitionBatch:
    """Column-oriented batch of transitions (same fields as TransitionSample)."""

    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: np.ndarray
    behavior_prob: np.ndarray
    target_prob: np.ndarray
    is_initial: np.ndarray

    def __len__(self):
        return len(self.state)

    @property
    def rho(self) -> np.ndarray:
        return self.target_prob / self.behavior_prob

    def __getitem__(self, i) -> TransitionSample:
        return TransitionSample(
            int(self.state[i]), int(self.action[i]), int(self.next_state[i]), float(self.reward[i]),
            float(self.behavior_prob[i]), float(self.target_prob[i]), bool(self.is_initial[i]),
        )


def _inverse_cdf_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cum).sum(axis=1)
    # guard against the last cumulative entry rounding below 1
    last = probs.shape[-1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)


def sample_batch(mdp: Mdp, behavior: Policy, target: Policy, d_mu, rng: np.random.Generator, size: int) -> TransitionBatch:
    """Draw ``s ~ d_mu``, ``a ~ mu(.|s)``, ``s' ~ P(.|s,a)`` by inverse CDF."""
    d = np.asarray(d_mu, dtype=np.float64)
    mu = np.asarray(behavior)
    pi = np.asarray(target)
    if d.shape != (mdp.n_states,) or mu.shape != pi.shape or mu.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionMismatch("d_mu / policies do not match the MDP")
    u = rng.random((3, size))
    cum = np.cumsum(d)
    s = np.minimum(np.searchsorted(cum, u[0], side="right"), len(d) - 1 - np.argmax(d[::-1] > 0))
    a = _inverse_cdf_rows(mu[s], u[1])
    rows = mdp.transition[s, a]
    if isinstance(mdp, EpisodicMdp):
        # termination mass maps to index n (no successor); callers handle it
        rows = np.concatenate([rows, 1.0 - rows.sum(axis=1, keepdims=True)], axis=1)
    sp = _inverse_cdf_rows(rows, u[2])
    is_init = (s == mdp.start_state) if isinstance(mdp, EpisodicMdp) else np.zeros(size, dtype=bool)
    return TransitionBatch(s, a, sp, mdp.reward[s, a], mu[s, a], pi[s, a], is_init)


def sample_transition(mdp: Mdp, behavior: Policy, target: Policy, d_mu, rng: np.random.Generator) -> TransitionSample:
    return sample_batch(mdp, behavior, target, d_mu, rng, 1)[0]


# ---------------------------------------------------------------------------
# Models and schedules


@dataclass
class LinearValueModel:
    features: FeatureMap
    weights: np.ndarray = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.zeros(self.features.k)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.features.k,):
            raise DimensionMismatch("value weights do not match the feature width")

    def values(self, states=None) -> np.ndarray:
        phi = self.features.matrix
        return (phi if states is None else phi[states]) @ self.weights


@dataclass
class LinearRatioModel:
    """``c_hat(s) = phi(s)^T w``. Doubles as a differentiable per-state model:
    ``values(states)`` and ``grads(states)`` (rows of ``Phi``)."""

    features: FeatureMap
    weights: np.ndarray = None

    def __post_init__(self):
        if self.weights is None:
            # c = e when the features span the constant vector, else least squares
            self.weights = np.linalg.lstsq(self.features.matrix, np.ones(self.features.n_states), rcond=None)[0]
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.features.k,):
            raise DimensionMismatch("ratio weights do not match the feature width")

    def values(self, states=None) -> np.ndarray:
        phi = self.features.matrix
        return (phi if states is None else phi[states]) @ self.weights

    def grads(self, states) -> np.ndarray:
        return self.features.matrix[states]


@dataclass(frozen=True)
class StepSchedule:
    """``constant``: alpha0 always. ``robbins_monro``: ``alpha0 / (1 + t / t0)``."""

    kind: str = "robbins_monro"
    alpha0: float = 0.5
    t0: float = 1e4

    def __post_init__(self):
        if self.kind not in ("constant", "robbins_monro"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.alpha0 <= 0 or self.t0 <= 0:
            raise ValueError("alpha0 and t0 must be positive")

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return self.alpha0
        return self.alpha0 / (1.0 + t / self.t0)

    def array(self, n: int, start: int = 0) -> np.ndarray:
        t = np.arange(start, start + n, dtype=np.float64)
        if self.kind == "constant":
            return np.full(n, self.alpha0)
        return self.alpha0 / (1.0 + t / self.t0)


# ---------------------------------------------------------------------------
# Value updates


def td_step(model: LinearValueModel, sample: TransitionSample, gamma: float, alpha: float) -> np.ndarray:
    """Semi-gradient TD(0): returns the updated weight vector."""
    phi = model.features.matrix
    theta = model.weights
    delta = sample.reward + gamma * phi[sample.next_state] @ theta - phi[sample.state] @ theta
    return theta + alpha * delta * phi[sample.state]


def reweighted_td_step(model: LinearValueModel, sample: TransitionSample, ratio_value: float,
                       gamma: float, alpha: float) -> np.ndarray:
    """TD(0) scaled by ``ratio_value * pi(a|s)/mu(a|s)``."""
    if ratio_value < 0:
        raise ValueError("ratio_value must be nonnegative")
    phi = model.features.matrix
    theta = model.weights
    delta = sample.reward + gamma * phi[sample.next_state] @ theta - phi[sample.state] @ theta
    return theta + alpha * ratio_value * sample.rho * delta * phi[sample.state]


# ---------------------------------------------------------------------------
# Ratio updates


def cop_td_step(c, sample: TransitionSample, alpha: float) -> np.ndarray:
    """``c(s') += alpha [rho c(s) - c(s')]``; returns a new vector."""
    return discounted_cop_td_step(c, sample, alpha, 1.0)


def discounted_cop_td_step(c, sample: TransitionSample, alpha: float, gamma_hat: float) -> np.ndarray:
    c = np.array(c, dtype=np.float64)
    s, sp = sample.state, sample.next_state
    c[sp] += alpha * (gamma_hat * sample.rho * c[s] + (1.0 - gamma_hat) - c[sp])
    return c


def linear_cop_td_step(model: LinearRatioModel, sample: TransitionSample, alpha: float, gamma_hat: float) -> np.ndarray:
    phi = model.features.matrix
    w = model.weights
    err = gamma_hat * sample.rho * (phi[sample.state] @ w) + (1.0 - gamma_hat) - phi[sample.next_state] @ w
    return w + alpha * err * phi[sample.next_state]


# ---------------------------------------------------------------------------
# Projection onto the d_mu-weighted simplex


def _equality_projection(w: np.ndarray, a: np.ndarray) -> np.ndarray:
    return w + a * (1.0 - a @ w) / (a @ a)


def project_weighted_simplex(model: LinearRatioModel, d_mu, tol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Euclidean projection of ``w`` onto
    ``{u : sum_s d_mu(s) phi(s)^T u = 1, phi(s)^T u >= 0 for all s}``.

    Primal active-set method: start from a feasible point (the equality-only
    projection if it happens to be feasible, otherwise an LP phase 1), then
    repeatedly solve the equality-constrained subproblem on the working set,
    adding blocking constraints and dropping ones with negative multipliers.
    """
    G = model.features.matrix
    w = np.asarray(model.weights, dtype=np.float64)
    d = np.asarray(d_mu, dtype=np.float64)
    if d.shape != (G.shape[0],):
        raise DimensionMismatch("d_mu length does not match the features")
    a = G.T @ d
    if a @ a == 0:
        raise Infeasible("sum_s d_mu(s) phi(s) is zero")

    x = _equality_projection(w, a)
    if np.all(G @ x >= -tol):
        return x

    phase1 = linprog(np.zeros(len(w)), A_ub=-G, b_ub=np.zeros(G.shape[0]), A_eq=a[None, :], b_eq=[1.0],
                     bounds=[(None, None)] * len(w), method="highs")
    if phase1.status != 0:
        raise Infeasible("no weight vector satisfies the weighted-simplex constraints")
    x = phase1.x
    # shift back onto the constraint surfaces exactly
    gx = G @ x
    working = [i for i in np.argsort(gx) if gx[i] <= 1e-9]
    working = _independent_rows(G, a, working)

    max_iter = max_iter or 10 * (G.shape[0] + G.shape[1]) + 100
    for _ in range(max_iter):
        A = np.vstack([a[None, :], G[working]]) if working else a[None, :]
        grad = x - w
        lam, *_ = np.linalg.lstsq(A.T, grad, rcond=None)
        p = -(grad - A.T @ lam)
        if np.max(np.abs(p)) <= tol * max(1.0, np.max(np.abs(x))):
            ineq = lam[1:]
            if ineq.size == 0 or ineq.min() >= -tol:
                return x
            working.pop(int(np.argmin(ineq)))
            continue
        gp = G @ p
        gx = G @ x
        step, block = 1.0, None
        for i in np.flatnonzero(gp < -1e-15):
            if i in working:
                continue
            t = -gx[i] / gp[i]
            if t < step:
                step, block = max(t, 0.0), int(i)
        x = x + step * p
        if block is not None:
            working.append(block)
    raise Infeasible("active-set iteration did not terminate")  # pragma: no cover


def _independent_rows(G: np.ndarray, a: np.ndarray, rows: list) -> list:
    keep: list = []
    basis = a[None, :]
    for i in rows:
        cand = np.vstack([basis, G[i]])
        if np.linalg.matrix_rank(cand, tol=1e-10) == cand.shape[0]:
            keep.append(int(i))
            basis = cand
    return keep


# ---------------------------------------------------------------------------
# Soft normalization


def normalization_loss(c_values, d_mu) -> float:
    """``0.5 (sum_s d_mu(s) c(s) - 1)^2``."""
    return 0.5 * (float(np.dot(np.asarray(d_mu, dtype=np.float64), np.asarray(c_values, dtype=np.float64))) - 1.0) ** 2


def normalization_grad_estimate(model, states) -> np.ndarray:
    """Unbiased estimate of the normalization-loss gradient from ``m >= 2``
    states drawn from ``d_mu``: each sample's gradient is weighted by the
    leave-one-out mean of the others minus one."""
    states = np.asarray(states)
    m = len(states)
    if m < 2:
        raise InsufficientSamples("need at least two samples; a single sample gives a biased estimate")
    c = np.asarray(model.values(states), dtype=np.float64)
    g = np.asarray(model.grads(states), dtype=np.float64)
    loo = (c.sum() - c) / (m - 1) - 1.0
    return (loo[:, None] * g).mean(axis=0)


# ---------------------------------------------------------------------------
# Tabular learning runs


@dataclass
class RatioRun:
    c: np.ndarray
    rows: list = field(default_factory=list)  # (step, max_error, weighted_error, loss)
    status: str = "ok"


def learn_ratio_tabular(
    mdp: Mdp,
    behavior: Policy,
    target: Policy,
    d_mu,
    gamma_hat: float,
    steps: int,
    rng: np.random.Generator,
    schedule: StepSchedule | None = None,
    renormalize_every: int | None = None,
    reference=None,
    record_every: int = 10_000,
    chunk: int = 100_000,
) -> RatioRun:
    """Run tabular (discounted) COP-TD from ``c = e`` on i.i.d. samples.

    With ``renormalize_every`` set, ``c`` is rescaled to unit ``d_mu``-mass at
    that cadence. ``reference`` (the exact ratio) enables error recording.
    The inner loop is the same arithmetic as :func:`discounted_cop_td_step`.
    """
    schedule = schedule or StepSchedule()
    d = np.asarray(d_mu, dtype=np.float64)
    c = [1.0] * mdp.n_states
    ref = None if reference is None else np.asarray(reference, dtype=np.float64)
    run = RatioRun(np.ones(mdp.n_states))
    g, one_minus_g = float(gamma_hat), 1.0 - float(gamma_hat)
    t = 0
    while t < steps:
        n = min(chunk, steps - t)
        batch = sample_batch(mdp, behavior, target, d, rng, n)
        S = batch.state.tolist()
        SP = batch.next_state.tolist()
        RHO = batch.rho.tolist()
        ALPHA = schedule.array(n, start=t).tolist()
        for i in range(n):
            sp = SP[i]
            c[sp] += ALPHA[i] * (g * RHO[i] * c[S[i]] + one_minus_g - c[sp])
            t += 1
            if renormalize_every and t % renormalize_every == 0:
                mass = float(np.dot(d, c))
                if mass > 0:
                    c = [v / mass for v in c]
            if ref is not None and t % record_every == 0:
                cv = np.asarray(c)
                run.rows.append((t, float(np.max(np.abs(cv - ref))),
                                 float(np.sqrt(d @ (cv - ref) ** 2)), normalization_loss(cv, d)))
        if not np.all(np.isfinite(c)):
            run.status = "diverged"
            break
    run.c = np.asarray(c)
    return run


def learn_ratio_linear(
    mdp: Mdp,
    behavior: Policy,
    target: Policy,
    d_mu,
    features: FeatureMap,
    gamma_hat: float,
    steps: int,
    rng: np.random.Generator,
    schedule: StepSchedule | None = None,
    chunk: int = 100_000,
) -> np.ndarray:
    """Linear discounted COP-TD (no projection step); returns the weights."""
    schedule = schedule or StepSchedule()
    model = LinearRatioModel(features)
    phi = features.matrix
    w = model.weights.copy()
    t = 0
    while t < steps:
        n = min(chunk, steps - t)
        b = sample_batch(mdp, behavior, target, d_mu, rng, n)
        alphas = schedule.array(n, start=t)
        rho = b.rho
        for i in range(n):
            fs, fn = phi[b.state[i]], phi[b.next_state[i]]
            err = gamma_hat * rho[i] * (fs @ w) + (1.0 - gamma_hat) - fn @ w
            w += alphas[i] * err * fn
        t += n
    return w
