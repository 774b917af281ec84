"""Desk-scale environment generators.

Each generator returns an :class:`EnvInstance` bundling the MDP with a canonical
behavior/target policy pair so that every study can be described by
``(kind, params, seed)`` alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec
from .mdp import EpisodicMdp, InducedChain, Mdp, Policy, check_ergodic, induce_chain

KINDS = ("random_ergodic", "chain", "gridworld", "divergence_example", "episodic_chain", "json_file")


@dataclass(frozen=True)
class EnvInstance:
    name: str
    mdp: Mdp
    behavior: Policy
    target: Policy
    features: np.ndarray | None = field(default=None, repr=False)
    info: dict = field(default_factory=dict, repr=False)


def random_ergodic(n_states: int = 10, n_actions: int = 3, seed: int = 0, mix: float = 0.05,
                   gamma: float = 0.9, target_mix: float = 0.5) -> EnvInstance:
    """Rows drawn from a flat Dirichlet, then mixed with uniform at rate ``mix``.

    The target policy is a flat-Dirichlet draw blended with uniform at rate
    ``target_mix`` (which caps the importance ratio at
    ``n_actions * (1 - target_mix) + target_mix``); the behavior is uniform.
    """
    if n_states < 1 or n_actions < 1 or not 0.0 < mix <= 1.0 or not 0.0 <= target_mix <= 1.0:
        raise InvalidSpec("random_ergodic needs n_states, n_actions >= 1, mix in (0, 1], target_mix in [0, 1]")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P = (1.0 - mix) * P + mix / n_states
    P /= P.sum(axis=-1, keepdims=True)
    R = rng.normal(size=(n_states, n_actions))
    target = (1.0 - target_mix) * rng.dirichlet(np.ones(n_actions), size=n_states) + target_mix / n_actions
    target /= target.sum(axis=1, keepdims=True)
    mdp = Mdp(P, R, gamma)
    inst = EnvInstance(f"random_ergodic{n_states}_s{seed}", mdp, Policy.uniform(n_states, n_actions), Policy(target))
    assert check_ergodic(induce_chain(mdp, inst.behavior))
    return inst


def chain(n_states: int = 5, move_prob: float = 0.8, right_prob: float = 0.6, gamma: float = 0.9) -> EnvInstance:
    """Birth-death chain with actions left (0) and right (1); reward 1 at the right end.

    A move succeeds with ``move_prob`` and otherwise leaves the state unchanged;
    moving off either end also stays put. Behavior is uniform, the target goes
    right with probability ``right_prob``. Seed-independent.
    """
    if n_states < 2:
        raise InvalidSpec("chain needs at least 2 states")
    P = np.zeros((n_states, 2, n_states))
    for s in range(n_states):
        for a, step in ((0, -1), (1, 1)):
            nxt = min(max(s + step, 0), n_states - 1)
            P[s, a, nxt] += move_prob
            P[s, a, s] += 1.0 - move_prob
    R = np.zeros((n_states, 2))
    R[n_states - 1, :] = 1.0
    target = np.tile([1.0 - right_prob, right_prob], (n_states, 1))
    return EnvInstance(f"chain{n_states}", Mdp(P, R, gamma), Policy.uniform(n_states, 2), Policy(target))


GRID_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


def gridworld(rows: int = 5, cols: int = 5, slip: float = 0.0, gamma: float = 0.95,
              target_epsilon: float = 0.1) -> EnvInstance:
    """Sparse-reward gridworld: start at the top-left corner, goal at the
    bottom-right. Entering the goal pays 1; the goal then resets to the start,
    which keeps the tabular chain ergodic.

    The target policy is epsilon-greedy with respect to the optimal Q-values.
    """
    if rows < 2 or cols < 2 or not 0.0 <= slip < 1.0:
        raise InvalidSpec("gridworld needs rows, cols >= 2 and slip in [0, 1)")
    n = rows * cols
    start, goal = 0, n - 1
    P = np.zeros((n, 4, n))
    R = np.zeros((n, 4))
    for s in range(n):
        r, c = divmod(s, cols)
        for a in range(4):
            if s == goal:
                P[s, a, start] = 1.0
                continue
            for b, (dr, dc) in enumerate(GRID_MOVES):
                p = (1.0 - slip) if b == a else slip / 3.0
                if p == 0.0:
                    continue
                rr, cc = r + dr, c + dc
                nxt = rr * cols + cc if 0 <= rr < rows and 0 <= cc < cols else s
                P[s, a, nxt] += p
            R[s, a] = P[s, a, goal]
    mdp = Mdp(P, R, gamma)
    q = optimal_q(mdp)
    from .trainer import greedy_policy

    return EnvInstance(
        f"gridworld{rows}x{cols}",
        mdp,
        Policy.uniform(n, 4),
        greedy_policy(q, target_epsilon),
        info={"rows": rows, "cols": cols, "start": start, "goal": goal, "slip": slip},
    )


def optimal_q(mdp: Mdp, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        nq = mdp.reward + mdp.discount * mdp.transition @ q.max(axis=1)
        if np.max(np.abs(nq - q)) < tol:
            return nq
        q = nq
    return q


def divergence_example(gamma: float = 0.9, stick: float = 0.9) -> EnvInstance:
    """Two states, one feature ``phi = [1, 2]``.

    Action 0 moves to state 1 with probability ``stick`` (else state 0) from
    anywhere; action 1 does the mirror image. The target always takes action
    0, the behavior is uniform, so ``d_mu = [1/2, 1/2]`` while ``d_pi`` puts
    ``stick`` on state 1. Under ``d_mu`` the expected semi-gradient TD matrix
    for the target's chain is positive, so uncorrected off-policy TD grows
    without bound; under ``d_pi`` it is negative.
    """
    P = np.zeros((2, 2, 2))
    P[:, 0, :] = [1.0 - stick, stick]
    P[:, 1, :] = [stick, 1.0 - stick]
    R = np.zeros((2, 2))
    R[1, :] = 1.0
    mdp = Mdp(P, R, gamma)
    return EnvInstance(
        "divergence_example",
        mdp,
        Policy.uniform(2, 2),
        Policy.deterministic([0, 0], 2),
        features=np.array([[1.0], [2.0]]),
    )


def episodic_chain(n_states: int = 5, advance: float = 0.8, terminate: float = 0.1) -> EpisodicMdp:
    """Start state 0 feeds a corridor 1..n-1; every action leaks ``terminate``.

    Action 0 ("forward") moves up the corridor, action 1 ("back") moves down
    but never back into the start state. The last state terminates on
    forward.
    """
    if n_states < 2 or not 0.0 < terminate < 1.0 or not 0.0 < advance <= 1.0 - terminate:
        raise InvalidSpec("episodic_chain needs n_states >= 2, terminate in (0,1), advance <= 1 - terminate")
    n = n_states
    P = np.zeros((n, 2, n))
    stay = 1.0 - advance - terminate
    for s in range(n):
        if s == 0:
            P[0, :, 1] = 1.0 - terminate
            continue
        fwd = s + 1 if s + 1 < n else None
        back = max(s - 1, 1)
        if fwd is not None:
            P[s, 0, fwd] += advance
        P[s, 0, s] += stay
        P[s, 1, back] += advance
        P[s, 1, s] += stay
    R = np.zeros((n, 2))
    R[n - 1, 0] = 1.0
    return EpisodicMdp(P, R, 0.9, start_state=0)


def episodic_instance(n_states: int = 5, seed: int = 0) -> EnvInstance:
    emdp = episodic_chain(n_states)
    rng = np.random.default_rng(seed)
    target = rng.dirichlet(np.ones(2), size=n_states)
    return EnvInstance(f"episodic_chain{n_states}_s{seed}", emdp, Policy.uniform(n_states, 2), Policy(target))


def generate_env(kind: str, params: dict | None = None, seed: int = 0) -> EnvInstance:
    """Build an environment deterministically from ``(kind, params, seed)``."""
    params = dict(params or {})
    try:
        if kind == "random_ergodic":
            return random_ergodic(seed=seed, **params)
        if kind == "chain":
            return chain(**params)
        if kind == "gridworld":
            return gridworld(**params)
        if kind == "divergence_example":
            return divergence_example(**params)
        if kind == "episodic_chain":
            return episodic_instance(seed=seed, **params)
        if kind == "json_file":
            return _from_json(**params)
    except TypeError as exc:
        raise InvalidSpec(f"bad parameters for {kind}: {exc}") from exc
    raise InvalidSpec(f"unknown environment kind {kind!r}; expected one of {KINDS}")


def _from_json(path: str, behavior=None, target=None) -> EnvInstance:
    import json
    from pathlib import Path

    doc = json.loads(Path(path).read_text())
    mdp = EpisodicMdp.from_dict(doc) if "start_state" in doc else Mdp.from_dict(doc)
    beh = Policy(behavior) if behavior is not None else Policy.uniform(mdp.n_states, mdp.n_actions)
    tgt = Policy(target) if target is not None else beh
    return EnvInstance(Path(path).stem, mdp, beh, tgt)


def suite(n_states: int = 5) -> list[EnvInstance]:
    """Fixed instance suite used by the acceptance battery."""
    return [chain(n_states)] + [random_ergodic(n_states, seed=s) for s in range(3)]


@dataclass(frozen=True)
class ReversibleInstance:
    chain: InducedChain
    d_mu: np.ndarray
    features: np.ndarray
    ratio: np.ndarray


def reversible_instance(seed: int = 0, n_states: int = 6, k: int = 2, sweeps: int = 5000) -> ReversibleInstance:
    """Target chain whose COP operator is symmetric in the Euclidean inner product.

    A random symmetric positive ``W`` is scaled to ``S = diag(x) W diag(x)``
    with ``S d = d`` (symmetric Sinkhorn iteration) for a random ``d``. Then
    ``P_pi = D^{-1} S D`` is stochastic and reversible, its stationary
    distribution is proportional to ``d**2``, the COP operator for
    ``d_mu = d`` is ``S`` itself and the ratio is proportional to ``d``. A
    behavior chain ``e d^T`` (i.i.d. draws from ``d``) realizes ``d_mu``.
    Random Gaussian features are resampled until the ratio lies outside
    their span.
    """
    rng = np.random.default_rng(seed)
    d = rng.dirichlet(np.full(n_states, 2.0))
    W = rng.random((n_states, n_states))
    W = W + W.T
    x = np.ones(n_states)
    for _ in range(sweeps):
        x = np.sqrt(x * d / (W @ (x * d)))
    S = x[:, None] * W * x[None, :]
    P = S * d[None, :] / d[:, None]
    P /= P.sum(axis=1, keepdims=True)
    ratio = d / (d @ d)
    while True:
        phi = rng.normal(size=(n_states, k))
        resid = ratio - phi @ np.linalg.lstsq(phi, ratio, rcond=None)[0]
        if np.linalg.norm(resid) > 1e-3 * np.linalg.norm(ratio):
            break
    return ReversibleInstance(InducedChain(P), d, phi, ratio)
