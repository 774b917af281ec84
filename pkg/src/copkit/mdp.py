"""Tabular MDPs, policy-induced Markov chains and their stationary distributions."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import constants as K
from .errors import (
    DimensionMismatch,
    InvalidDiscount,
    InvalidModel,
    NonEpisodic,
    NonErgodic,
    SolverFailure,
    ZeroDenominator,
)


def _frozen(x) -> np.ndarray:
    a = np.array(x, dtype=np.float64)
    a.setflags(write=False)
    return a


def _check_stochastic(P: np.ndarray, what: str, substochastic: bool = False) -> None:
    if not np.all(np.isfinite(P)):
        raise InvalidModel(f"{what} has non-finite entries")
    if np.any(P < 0):
        raise InvalidModel(f"{what} has negative entries")
    sums = P.sum(axis=-1)
    if substochastic:
        if np.any(sums > 1 + K.PROB_ATOL):
            raise InvalidModel(f"{what} has rows summing above 1")
    elif np.any(np.abs(sums - 1) > K.PROB_ATOL):
        worst = float(np.max(np.abs(sums - 1)))
        raise InvalidModel(f"{what} rows do not sum to 1 (max deviation {worst:.3g})")


@dataclass(frozen=True)
class Policy:
    """Action probabilities ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise DimensionMismatch(f"policy must be a matrix, got shape {p.shape}")
        _check_stochastic(p, "policy")
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> Policy:
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> Policy:
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((len(actions), n_actions))
        p[np.arange(len(actions)), actions] = 1.0
        return cls(p)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.probs, dtype=dtype)


@dataclass(frozen=True)
class Mdp:
    """Finite MDP. ``transition[s, a, s'] = P(s'|s,a)``, ``reward[s, a] = R(s,a)``."""

    transition: np.ndarray
    reward: np.ndarray
    discount: float = 0.9

    def __post_init__(self):
        P = _frozen(self.transition)
        R = _frozen(self.reward)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise DimensionMismatch(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise DimensionMismatch(f"reward shape {R.shape} does not match (S, A) = {P.shape[:2]}")
        _check_stochastic(P, "transition", substochastic=self._substochastic)
        if not np.all(np.isfinite(R)):
            raise InvalidModel("reward has non-finite entries")
        if not 0.0 <= self.discount < 1.0:
            raise InvalidDiscount(f"discount must lie in [0, 1), got {self.discount}")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "discount", float(self.discount))

    _substochastic = False

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    # -- JSON ---------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.discount,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> Mdp:
        return cls(*_parse_doc(doc))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> Mdp:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class EpisodicMdp(Mdp):
    """MDP whose rows may leak probability mass (termination) and that starts in
    a single state never re-entered."""

    start_state: int = 0

    _substochastic = True

    def __post_init__(self):
        super().__post_init__()
        s0 = int(self.start_state)
        if not 0 <= s0 < self.n_states:
            raise DimensionMismatch(f"start_state {s0} out of range")
        if np.any(self.transition[:, :, s0] > 0):
            raise InvalidModel("transitions into the start state are not allowed")
        trapped = _closed_action_set(self.transition)
        if trapped:
            raise NonEpisodic(f"some policy never terminates (closed set {sorted(trapped)})")

    @property
    def start_distribution(self) -> np.ndarray:
        d0 = np.zeros(self.n_states)
        d0[self.start_state] = 1.0
        return d0

    def to_dict(self) -> dict:
        doc = super().to_dict()
        doc["start_state"] = int(self.start_state)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> EpisodicMdp:
        return cls(*_parse_doc(doc), int(doc.get("start_state", 0)))


def _parse_doc(doc: dict):
    missing = {"n_states", "n_actions", "gamma", "transition", "reward"} - set(doc)
    if missing:
        raise InvalidModel(f"MDP document missing keys: {sorted(missing)}")
    P = np.asarray(doc["transition"], dtype=np.float64)
    if P.shape[:2] != (doc["n_states"], doc["n_actions"]):
        raise DimensionMismatch(
            f"declared ({doc['n_states']}, {doc['n_actions']}) but transition has shape {P.shape}"
        )
    return P, np.asarray(doc["reward"], dtype=np.float64), float(doc["gamma"])


def _closed_action_set(P: np.ndarray) -> set[int]:
    """Largest state set in which every state has an action keeping all mass
    inside the set. Nonempty iff some policy fails to terminate."""
    alive = set(range(P.shape[0]))
    changed = True
    while changed and alive:
        changed = False
        idx = sorted(alive)
        for s in list(alive):
            if not np.any(P[s][:, idx].sum(axis=1) >= 1 - K.PROB_ATOL):
                alive.discard(s)
                changed = True
                idx = sorted(alive)
    return alive


@dataclass(frozen=True)
class InducedChain:
    """State-to-state chain ``P_pi`` with expected reward ``r_pi``."""

    transition: np.ndarray
    expected_reward: np.ndarray | None = None
    terminating: bool = False

    def __post_init__(self):
        P = _frozen(self.transition)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise DimensionMismatch(f"chain transition must be square, got {P.shape}")
        _check_stochastic(P, "chain transition", substochastic=self.terminating)
        object.__setattr__(self, "transition", P)
        if self.expected_reward is None:
            object.__setattr__(self, "expected_reward", _frozen(np.zeros(P.shape[0])))
        else:
            r = _frozen(self.expected_reward)
            if r.shape != (P.shape[0],):
                raise DimensionMismatch(f"expected_reward shape {r.shape} != ({P.shape[0]},)")
            object.__setattr__(self, "expected_reward", r)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]


@dataclass(frozen=True)
class StateDistribution:
    probs: np.ndarray

    def __post_init__(self):
        d = _frozen(self.probs)
        if d.ndim != 1:
            raise DimensionMismatch("distribution must be a vector")
        if np.any(d < 0) or abs(d.sum() - 1.0) > K.DIST_ATOL:
            raise InvalidModel(f"not a distribution (sum={d.sum():.12g}, min={d.min():.3g})")
        object.__setattr__(self, "probs", d)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.probs, dtype=dtype)

    def __len__(self):
        return len(self.probs)


@dataclass(frozen=True)
class RatioVector:
    """Per-state ratio estimate ``c``; ``e`` is ``RatioVector.ones(n)``."""

    values: np.ndarray
    normalized: bool = False
    d_mu: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        c = _frozen(self.values)
        if c.ndim != 1 or not np.all(np.isfinite(c)):
            raise InvalidModel("ratio vector must be a finite vector")
        object.__setattr__(self, "values", c)
        if self.normalized:
            if self.d_mu is None:
                raise InvalidModel("normalized ratio vector needs d_mu")
            mass = float(np.asarray(self.d_mu) @ c)
            if abs(mass - 1.0) > K.RATIO_NORM_ATOL:
                raise InvalidModel(f"sum d_mu * c = {mass:.12g}, expected 1")

    @classmethod
    def ones(cls, n: int) -> RatioVector:
        return cls(np.ones(n))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return len(self.values)


# ---------------------------------------------------------------------------
# Operations


def induce_chain(mdp: Mdp, policy: Policy | np.ndarray) -> InducedChain:
    pi = np.asarray(policy, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionMismatch(f"policy shape {pi.shape} != ({mdp.n_states}, {mdp.n_actions})")
    P = np.einsum("sa,sat->st", pi, mdp.transition)
    r = np.einsum("sa,sa->s", pi, mdp.reward)
    if isinstance(mdp, EpisodicMdp):
        return InducedChain(P, r, terminating=True)
    # rounding in the mixture can push row sums a few ulps off
    P = P / P.sum(axis=1, keepdims=True)
    return InducedChain(P, r)


def _as_matrix(chain) -> np.ndarray:
    if isinstance(chain, InducedChain):
        return chain.transition
    return np.asarray(chain, dtype=np.float64)


def _period(adj: np.ndarray) -> int:
    """Period of a strongly connected digraph: gcd of level[u] + 1 - level[v]
    over all edges, with BFS levels from node 0."""
    n = adj.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    us, vs = np.nonzero(adj)
    diffs = np.abs(level[us] + 1 - level[vs])
    return int(reduce(math.gcd, diffs.tolist(), 0))


def check_ergodic(chain: InducedChain | np.ndarray) -> bool:
    """Structural test: strongly connected nonzero pattern with period 1."""
    P = _as_matrix(chain)
    adj = P > 0
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    if n_comp != 1:
        return False
    return _period(adj) == 1


def _solve_stationary(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    if n <= K.DIRECT_SOLVE_MAX_STATES:
        A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
        b = np.zeros(n + 1)
        b[-1] = 1.0
        d, *_ = np.linalg.lstsq(A, b, rcond=None)
    else:
        d = np.full(n, 1.0 / n)
        for _ in range(K.POWER_ITER_MAX):
            nd = d @ P
            if np.max(np.abs(nd - d)) < K.SOLVER_ATOL * 1e-2:
                d = nd
                break
            d = nd
    d = np.where(d < 0, 0.0, d)
    return d / d.sum()


def stationary_distribution(chain: InducedChain | np.ndarray) -> StateDistribution:
    P = _as_matrix(chain)
    if not check_ergodic(P):
        raise NonErgodic("chain is not irreducible and aperiodic")
    d = _solve_stationary(P)
    resid = float(np.max(np.abs(d @ P - d)))
    if resid > K.SOLVER_ATOL:
        raise SolverFailure(f"stationary residual {resid:.3g} exceeds {K.SOLVER_ATOL}")
    return StateDistribution(d)


def discounted_reset_chain(chain: InducedChain, d_mu, gamma_hat: float) -> InducedChain:
    """``gamma_hat * P_pi + (1 - gamma_hat) * e d_mu^T``."""
    if not 0.0 <= gamma_hat <= 1.0:
        raise InvalidDiscount(f"gamma_hat must lie in [0, 1], got {gamma_hat}")
    P = _as_matrix(chain)
    d = np.asarray(d_mu, dtype=np.float64)
    if d.shape != (P.shape[0],):
        raise DimensionMismatch("d_mu length does not match chain")
    Ph = gamma_hat * P + (1.0 - gamma_hat) * d[None, :]
    Ph = Ph / Ph.sum(axis=1, keepdims=True)
    r = chain.expected_reward if isinstance(chain, InducedChain) else None
    return InducedChain(Ph, r)


def discounted_stationary(chain: InducedChain, d_mu, gamma_hat: float) -> StateDistribution:
    """Closed form ``(1 - g)(I - g P_pi^T)^{-1} d_mu`` for the stationary
    distribution of the discounted reset chain."""
    if not 0.0 <= gamma_hat < 1.0:
        raise InvalidDiscount(f"gamma_hat must lie in [0, 1), got {gamma_hat}")
    P = _as_matrix(chain)
    d = np.asarray(d_mu, dtype=np.float64)
    if d.shape != (P.shape[0],):
        raise DimensionMismatch("d_mu length does not match chain")
    try:
        x = np.linalg.solve(np.eye(len(d)) - gamma_hat * P.T, d)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - impossible for gamma_hat < 1
        raise SolverFailure(str(exc)) from exc
    x = (1.0 - gamma_hat) * x
    x = np.where(x < 0, 0.0, x)
    return StateDistribution(x / x.sum())


def ratio_of(numerator, denominator) -> RatioVector:
    num = np.asarray(numerator, dtype=np.float64)
    den = np.asarray(denominator, dtype=np.float64)
    if num.shape != den.shape:
        raise DimensionMismatch("numerator and denominator differ in length")
    bad = np.flatnonzero(den <= 0)
    if bad.size:
        raise ZeroDenominator(int(bad[0]))
    return RatioVector(num / den)


def spectral_radius_bound(P: np.ndarray, iters: int = K.EPISODIC_POWER_ITERS) -> float:
    """Power-iteration estimate ``max(|P|^k e)^(1/k)``.

    For nonnegative matrices this Gelfand-type estimate never undershoots the
    spectral radius, and is exactly 0 for nilpotent chains once ``k >= n``.
    """
    A = np.abs(np.asarray(P, dtype=np.float64))
    k = max(iters, A.shape[0])
    x = np.ones(A.shape[0])
    log_scale = 0.0
    for _ in range(k):
        x = A @ x
        m = x.max()
        if m == 0.0:
            return 0.0
        x /= m
        log_scale += math.log(m)
    return math.exp(log_scale / k)


def episodic_visitation(emdp: EpisodicMdp, policy) -> np.ndarray:
    """Unnormalized expected visit counts ``sum_i (P_pi^T)^i d_0``."""
    chain = induce_chain(emdp, policy)
    P = chain.transition
    rho = spectral_radius_bound(P)
    if rho >= 1.0 - K.EPISODIC_MARGIN:
        raise NonEpisodic(f"spectral radius estimate {rho:.12g} is not below 1")
    d0 = emdp.start_distribution
    d = np.linalg.solve(np.eye(emdp.n_states) - P.T, d0)
    resid = float(np.max(np.abs(d - P.T @ d - d0)))
    if resid >= K.SOLVER_ATOL:
        raise SolverFailure(f"visitation residual {resid:.3g}")
    return d


def value_function(chain: InducedChain, gamma: float) -> np.ndarray:
    """``V = (I - gamma P_pi)^{-1} r_pi``."""
    P = chain.transition
    return np.linalg.solve(np.eye(P.shape[0]) - gamma * P, chain.expected_reward)
