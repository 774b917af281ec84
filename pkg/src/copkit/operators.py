"""Expectation-level operators: Bellman, weighted projection, the COP family,
concentration coefficients and the off-policy approximation-error bound."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import constants as K
from .errors import (
    BoundViolated,
    DegenerateMass,
    DimensionMismatch,
    Diverged,
    IllConditioned,
    InvalidDiscount,
    InvalidModel,
    PreconditionViolated,
    SolverFailure,
    ZeroDenominator,
)
from .mdp import EpisodicMdp, InducedChain, discounted_stationary, induce_chain


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _positive(d, what="d_mu") -> np.ndarray:
    d = _vec(d)
    bad = np.flatnonzero(d <= 0)
    if bad.size:
        raise ZeroDenominator(int(bad[0]), f"{what} is zero at state {int(bad[0])}")
    return d


def weighted_norm(x, d) -> float:
    """``||x||_d = sqrt(sum_i d_i x_i^2)``."""
    x = _vec(x)
    return float(np.sqrt(np.dot(_vec(d), x * x)))


# ---------------------------------------------------------------------------
# Features and projections


@dataclass(frozen=True)
class FeatureMap:
    matrix: np.ndarray

    def __post_init__(self):
        phi = np.array(self.matrix, dtype=np.float64)
        if phi.ndim == 1:
            phi = phi[:, None]
        if phi.ndim != 2 or phi.shape[1] > phi.shape[0]:
            raise DimensionMismatch(f"feature matrix must be n x k with k <= n, got {phi.shape}")
        sv = np.linalg.svd(phi, compute_uv=False)
        if sv.min() <= K.FEATURE_RANK_TOL:
            raise InvalidModel(f"features are rank deficient (smallest singular value {sv.min():.3g})")
        phi.setflags(write=False)
        object.__setattr__(self, "matrix", phi)

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]

    @property
    def k(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def tabular(cls, n: int) -> FeatureMap:
        return cls(np.eye(n))


@dataclass(frozen=True)
class WeightedProjector:
    """``Pi_d = Phi (Phi^T D Phi)^{-1} Phi^T D``: least squares in ``||.||_d``."""

    features: FeatureMap
    weights: np.ndarray
    matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = _vec(self.weights).copy()
        phi = self.features.matrix
        if d.shape != (phi.shape[0],):
            raise DimensionMismatch("projection weights do not match the feature rows")
        if np.any(d < 0):
            raise InvalidModel("projection weights must be nonnegative")
        gram = phi.T @ (d[:, None] * phi)
        if np.linalg.cond(gram) >= K.CONDITION_MAX:
            raise IllConditioned(f"Phi^T D Phi has condition number {np.linalg.cond(gram):.3g}")
        proj = phi @ np.linalg.solve(gram, phi.T * d[None, :])
        d.setflags(write=False)
        proj.setflags(write=False)
        object.__setattr__(self, "weights", d)
        object.__setattr__(self, "matrix", proj)

    @classmethod
    def euclidean(cls, features: FeatureMap) -> WeightedProjector:
        return cls(features, np.ones(features.n_states))


def weighted_project(proj: WeightedProjector, x) -> np.ndarray:
    x = _vec(x)
    if x.shape != (proj.matrix.shape[0],):
        raise DimensionMismatch("vector length does not match projector")
    return proj.matrix @ x


# ---------------------------------------------------------------------------
# Bellman


def bellman_apply(chain: InducedChain, gamma: float, v) -> np.ndarray:
    v = _vec(v)
    if v.shape != (chain.n_states,):
        raise DimensionMismatch(f"value vector has shape {v.shape}, chain has {chain.n_states} states")
    return chain.expected_reward + gamma * (chain.transition @ v)


# ---------------------------------------------------------------------------
# COP operators


def cop_matrix(chain: InducedChain, d_mu) -> np.ndarray:
    """``Y = D_mu^{-1} P_pi^T D_mu`` as an explicit matrix."""
    d = _positive(d_mu)
    P = chain.transition if isinstance(chain, InducedChain) else _vec(chain)
    if d.shape != (P.shape[0],):
        raise DimensionMismatch("d_mu length does not match chain")
    return (P.T * d[None, :]) / d[:, None]


def cop_apply(chain: InducedChain, d_mu, c) -> np.ndarray:
    d = _positive(d_mu)
    c = _vec(c)
    P = chain.transition
    if c.shape != d.shape or d.shape != (P.shape[0],):
        raise DimensionMismatch("c, d_mu and chain disagree in size")
    return (P.T @ (d * c)) / d


def normalized_cop_apply(chain: InducedChain, d_mu, c) -> np.ndarray:
    """``Yc`` rescaled to unit ``d_mu``-weighted mass."""
    d = _vec(d_mu)
    y = cop_apply(chain, d, c)
    mass = float(d @ y)
    if mass <= K.DEGENERATE_MASS:
        raise DegenerateMass(f"d_mu-weighted mass {mass:.3g} is not positive")
    return y / mass


def _check_gamma_hat(gamma_hat: float) -> None:
    if not 0.0 <= gamma_hat <= 1.0:
        raise InvalidDiscount(f"gamma_hat must lie in [0, 1], got {gamma_hat}")


def discounted_cop_apply(chain: InducedChain, d_mu, c, gamma_hat: float) -> np.ndarray:
    _check_gamma_hat(gamma_hat)
    return gamma_hat * cop_apply(chain, d_mu, c) + (1.0 - gamma_hat)


def discounted_ratio(chain: InducedChain, d_mu, gamma_hat: float) -> np.ndarray:
    """Unique fixed point of the discounted COP operator for ``gamma_hat < 1``."""
    return np.asarray(discounted_stationary(chain, d_mu, gamma_hat)) / _positive(d_mu)


# ---------------------------------------------------------------------------
# Iteration drivers


@dataclass
class Trajectory:
    """Recorded iterates and per-step ``d``-weighted residuals.

    ``iterates[i]`` is the iterate after ``steps_recorded[i]`` applications.
    """

    steps_recorded: list[int]
    iterates: list[np.ndarray]
    residuals: np.ndarray
    distances: np.ndarray | None = None
    max_entries: np.ndarray | None = None
    status: str = "ok"

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def rows(self) -> list[dict]:
        out = []
        for k, r in enumerate(self.residuals, start=1):
            out.append({
                "step": k,
                "residual": float(r),
                "distance": float(self.distances[k - 1]) if self.distances is not None else float("nan"),
                "max_entry": float(self.max_entries[k - 1]),
            })
        return out


def iterate_operator(
    op: Callable[[np.ndarray], np.ndarray],
    c0,
    steps: int,
    record_every: int = 1,
    weights=None,
    fixed_point=None,
    raise_on_divergence: bool = True,
) -> Trajectory:
    """Apply ``op`` repeatedly from ``c0``.

    Residuals are ``||c^{k+1} - c^k||_weights`` (uniform weights by default).
    Iteration stops early, with status ``diverged``, once an entry exceeds the
    divergence threshold; in that case ``Diverged`` is raised unless
    ``raise_on_divergence`` is false.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    c = _vec(c0).copy()
    w = np.ones_like(c) if weights is None else _vec(weights)
    fp = None if fixed_point is None else _vec(fixed_point)
    rec_steps, rec = [0], [c.copy()]
    residuals, distances, max_entries = [], [], []
    status = "ok"
    for k in range(1, steps + 1):
        nxt = _vec(op(c))
        residuals.append(weighted_norm(nxt - c, w))
        max_entries.append(float(np.max(np.abs(nxt))) if nxt.size else 0.0)
        if fp is not None:
            distances.append(weighted_norm(nxt - fp, w))
        c = nxt
        if not np.all(np.isfinite(c)) or max_entries[-1] > K.DIVERGENCE_THRESHOLD:
            status = "diverged"
            rec_steps.append(k)
            rec.append(c.copy())
            if raise_on_divergence:
                raise Diverged(k, max_entries[-1])
            break
        if k % record_every == 0 or k == steps:
            rec_steps.append(k)
            rec.append(c.copy())
    return Trajectory(
        rec_steps,
        rec,
        np.asarray(residuals),
        np.asarray(distances) if fp is not None else None,
        np.asarray(max_entries),
        status,
    )


@dataclass
class ProjectedOutcome:
    outcome: str  # converged_to_zero | diverged | nonzero_fixed_point | other
    steps: int
    final: np.ndarray
    final_residual: float


def projected_cop_iterate(
    chain: InducedChain, d_mu, proj: WeightedProjector, c0, steps: int
) -> ProjectedOutcome:
    """Iterate ``Pi Y`` without normalization and classify where it ends up."""
    Y = cop_matrix(chain, d_mu)
    M = proj.matrix @ Y
    c = _vec(c0).copy()
    resid = float("inf")
    for k in range(1, steps + 1):
        nxt = M @ c
        resid = float(np.max(np.abs(nxt - c)))
        c = nxt
        size = float(np.max(np.abs(c)))
        if not np.isfinite(size) or size > K.DIVERGENCE_THRESHOLD:
            return ProjectedOutcome("diverged", k, c, resid)
        if size < K.ZERO_TOL:
            return ProjectedOutcome("converged_to_zero", k, c, resid)
        if resid < 1e-12 * size:
            return ProjectedOutcome("nonzero_fixed_point", k, c, resid)
    return ProjectedOutcome("other", steps, c, resid)


# ---------------------------------------------------------------------------
# Concentration and contraction


@dataclass(frozen=True)
class ConcentrationReport:
    n: int
    k_n: float
    k_bound: float
    safe_gamma: float


def concentration(chain: InducedChain, d_mu, d_pi, n: int) -> ConcentrationReport:
    """``K_n = max_s' sum_s d_mu(s)/d_mu(s') P_pi^n(s'|s)`` and its bound
    ``||d_mu/d_pi||_inf * ||d_pi/d_mu||_inf``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    dm = _positive(d_mu)
    dp = _positive(d_pi, "d_pi")
    Pn = np.linalg.matrix_power(chain.transition, n)
    z = (dm @ Pn) / dm
    k_n = float(z.max())
    k_bound = float(np.max(dm / dp) * np.max(dp / dm))
    return ConcentrationReport(n, k_n, k_bound, float(k_n ** (-1.0 / (2 * n))))


@dataclass(frozen=True)
class ContractionResult:
    n: int
    gamma_hat: float
    measured: float
    bound: float
    k_n: float


def contraction_check(
    chain: InducedChain,
    d_mu,
    gamma_hat: float,
    n: int,
    trials: int,
    rng: np.random.Generator | None = None,
    d_pi=None,
) -> ContractionResult:
    """Largest observed ``||Y_g^n c - c*|| / ||c - c*||`` over random ``c``
    against ``gamma_hat^n sqrt(K_n)``; raises ``BoundViolated`` on failure."""
    from .mdp import stationary_distribution

    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    dm = _vec(d_mu)
    dp = stationary_distribution(chain) if d_pi is None else d_pi
    k_n = concentration(chain, dm, dp, n).k_n
    bound = gamma_hat ** n * np.sqrt(k_n)
    if gamma_hat < 1.0:
        target = discounted_ratio(chain, dm, gamma_hat)
    else:
        target = np.zeros_like(dm)  # fixed-point family; the difference map is Y^n itself
    worst = 0.0
    for _ in range(trials):
        c = rng.normal(size=dm.shape) * rng.exponential(2.0)
        x = c
        for _ in range(n):
            x = discounted_cop_apply(chain, dm, x, gamma_hat)
        if gamma_hat == 1.0:
            num, den = weighted_norm(x, dm), weighted_norm(c, dm)
        else:
            num, den = weighted_norm(x - target, dm), weighted_norm(c - target, dm)
        if den > 0:
            worst = max(worst, num / den)
    if worst > bound + 1e-9:
        raise BoundViolated(f"measured ratio {worst:.12g} exceeds bound {bound:.12g} (n={n}, gamma_hat={gamma_hat})")
    return ContractionResult(n, gamma_hat, worst, float(bound), k_n)


# ---------------------------------------------------------------------------
# Approximation-error bound for the off-policy projected Bellman fixed point


@dataclass(frozen=True)
class ErrorBound:
    bound: float
    actual: float
    operator_norm: float
    v_hat: np.ndarray = field(repr=False)


def projected_operator_norm(proj: WeightedProjector, chain: InducedChain, d_pi) -> float:
    """``||Pi_d P_pi||_{d_pi}``: top singular value of
    ``D^{1/2} Pi_d P_pi D^{-1/2}`` with ``D = diag(d_pi)``."""
    s = np.sqrt(_positive(d_pi, "d_pi"))
    M = (s[:, None] * (proj.matrix @ chain.transition)) / s[None, :]
    return float(np.linalg.norm(M, 2))


def projected_bellman_solution(chain: InducedChain, gamma: float, proj: WeightedProjector) -> np.ndarray:
    """Solve ``V = Pi_d T V`` over ``span(Phi)`` (the linear TD fixed point)."""
    phi = proj.features.matrix
    d = proj.weights
    A = phi.T @ (d[:, None] * (phi - gamma * chain.transition @ phi))
    b = phi.T @ (d * chain.expected_reward)
    if np.linalg.cond(A) >= K.CONDITION_MAX:
        raise SolverFailure("projected Bellman system is singular")
    return phi @ np.linalg.solve(A, b)


def approximation_error_bound(
    chain: InducedChain, gamma: float, proj: WeightedProjector, d_pi, v_pi
) -> ErrorBound:
    dp = _vec(d_pi)
    v_pi = _vec(v_pi)
    norm = projected_operator_norm(proj, chain, dp)
    if gamma * norm >= 1.0:
        raise PreconditionViolated(norm, 1.0 / gamma if gamma > 0 else float("inf"))
    v_hat = projected_bellman_solution(chain, gamma, proj)
    numer = weighted_norm(weighted_project(proj, v_pi) - v_pi, dp)
    bound = numer / (1.0 - gamma * norm)
    actual = weighted_norm(v_hat - v_pi, dp)
    if actual > bound + 1e-9 * max(1.0, bound):
        raise BoundViolated(f"fixed-point error {actual:.12g} exceeds bound {bound:.12g}")
    return ErrorBound(bound, actual, norm, v_hat)


# ---------------------------------------------------------------------------
# Episodic COP


def episodic_cop_apply(emdp: EpisodicMdp, policy, d_mu_unnormalized, c, gamma_hat: float = 1.0) -> np.ndarray:
    """``g (D^{-1} P_pi^T D c + d_0) + (1 - g) e`` with ``c(s_0)`` pinned to 1.

    ``d_mu_unnormalized`` is the behavior policy's expected visit-count vector.
    """
    _check_gamma_hat(gamma_hat)
    chain = induce_chain(emdp, policy)
    d = _positive(d_mu_unnormalized)
    c = _vec(c).copy()
    s0 = emdp.start_state
    c[s0] = 1.0
    y = (chain.transition.T @ (d * c)) / d + emdp.start_distribution
    out = gamma_hat * y + (1.0 - gamma_hat)
    out[s0] = 1.0
    return out
