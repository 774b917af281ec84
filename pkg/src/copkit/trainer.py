"""Replay-based control agent with a learned ratio head.

The value learner is linear Q-learning (tabular features by default) with a
frozen target copy. A second linear head predicts the state-distribution
ratio; it is trained on uniform batches with the discounted COP-TD squared
loss, and its clipped predictions become the replay priorities for the value
batches.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import BufferNotWarm, ConfigError
from .learning import TransitionBatch, TransitionSample
from .mdp import Mdp, Policy
from .replay import ReplayBuffer

PRIORITY_MODES = ("ratio", "td_error", "uniform")


def greedy_policy(q_values, epsilon: float) -> Policy:
    """Epsilon-greedy policy; ties go to the lowest action index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    q = np.atleast_2d(np.asarray(q_values, dtype=np.float64))
    n_actions = q.shape[1]
    probs = np.full(q.shape, epsilon / n_actions)
    probs[np.arange(q.shape[0]), np.argmax(q, axis=1)] += 1.0 - epsilon
    return Policy(probs)


@dataclass
class TrainerConfig:
    eta: float = 0.02
    gamma_hat: float = 0.99
    epsilon: float = 0.1
    batch_size: int = 32
    normalization_weight: float = 0.0
    value_lr: float = 0.1
    ratio_lr: float = 1.0
    sync_period: int = 1000
    buffer_capacity: int = 10_000
    learning_starts: int = 1000
    train_every: int = 1
    priority_mode: str = "ratio"
    learn_ratio: bool = True
    ratio_from_prioritized: bool = False
    steps: int = 200_000
    eval_every: int = 5000
    td_priority_eps: float = 1e-3

    def __post_init__(self):
        problems = []
        if self.eta <= 0:
            problems.append("eta must be > 0")
        if not 0.0 <= self.gamma_hat <= 1.0:
            problems.append("gamma_hat must lie in [0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            problems.append("epsilon must lie in [0, 1]")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.normalization_weight < 0:
            problems.append("normalization_weight must be >= 0")
        if self.normalization_weight > 0 and self.batch_size < 2:
            problems.append("batch_size must be >= 2 when normalization is enabled")
        if self.value_lr <= 0 or self.ratio_lr <= 0:
            problems.append("learning rates must be > 0")
        for name in ("sync_period", "buffer_capacity", "train_every", "eval_every"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.learning_starts < 0 or self.steps < 0:
            problems.append("learning_starts and steps must be >= 0")
        if self.priority_mode not in PRIORITY_MODES:
            problems.append(f"priority_mode must be one of {PRIORITY_MODES}")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, doc: dict) -> TrainerConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class AgentParams:
    value_weights: np.ndarray  # (k_value, n_actions)
    ratio_weights: np.ndarray  # (k_ratio,)
    target_value_weights: np.ndarray
    target_ratio_weights: np.ndarray
    sync_period: int = 1000

    @classmethod
    def initial(cls, k_value: int, n_actions: int, ratio_init: np.ndarray, sync_period: int) -> AgentParams:
        v = np.zeros((k_value, n_actions))
        return cls(v, ratio_init.copy(), v.copy(), ratio_init.copy(), sync_period)

    def sync(self) -> None:
        self.target_value_weights = self.value_weights.copy()
        self.target_ratio_weights = self.ratio_weights.copy()


@dataclass
class Agent:
    """Mutable training state: parameters, replay memory and counters."""

    params: AgentParams
    buffer: ReplayBuffer
    value_features: np.ndarray
    ratio_features: np.ndarray
    behavior: np.ndarray  # mu(a|s), fixed
    gamma: float
    train_steps: int = 0
    env_steps: int = 0

    def q(self, states=None, target: bool = False) -> np.ndarray:
        phi = self.value_features if states is None else self.value_features[states]
        w = self.params.target_value_weights if target else self.params.value_weights
        return phi @ w

    def c(self, states=None, target: bool = False) -> np.ndarray:
        phi = self.ratio_features if states is None else self.ratio_features[states]
        w = self.params.target_ratio_weights if target else self.params.ratio_weights
        return phi @ w


def make_agent(n_states: int, n_actions: int, behavior, gamma: float, config: TrainerConfig,
               value_features=None, ratio_features=None) -> Agent:
    vf = np.eye(n_states) if value_features is None else np.asarray(value_features, dtype=np.float64)
    rf = np.eye(n_states) if ratio_features is None else np.asarray(ratio_features, dtype=np.float64)
    ratio_init = np.linalg.lstsq(rf, np.ones(n_states), rcond=None)[0]
    params = AgentParams.initial(vf.shape[1], n_actions, ratio_init, config.sync_period)
    return Agent(params, ReplayBuffer(config.buffer_capacity), vf, rf, np.asarray(behavior, dtype=np.float64), gamma)


def _target_policy_probs(agent: Agent, states, actions, epsilon: float) -> np.ndarray:
    q = agent.q(states, target=True)
    n_actions = q.shape[1]
    greedy = np.argmax(q, axis=1)
    return epsilon / n_actions + (1.0 - epsilon) * (greedy == actions)


def ratio_targets(agent: Agent, batch: TransitionBatch, config: TrainerConfig) -> np.ndarray:
    """Bootstrap targets ``g c_bar(s)^+ pi_bar(a|s)/mu(a|s) + (1 - g)``, or 1
    where the successor starts a new episode."""
    c_bar = np.maximum(agent.c(batch.state, target=True), 0.0)
    pi_bar = _target_policy_probs(agent, batch.state, batch.action, config.epsilon)
    tgt = config.gamma_hat * c_bar * pi_bar / batch.behavior_prob + (1.0 - config.gamma_hat)
    return np.where(batch.is_initial, 1.0, tgt)


def ratio_loss_batch(agent: Agent, batch: TransitionBatch, config: TrainerConfig):
    """Mean squared ratio loss over a batch and its gradient w.r.t. the ratio
    weights (the target side is held fixed)."""
    tgt = ratio_targets(agent, batch, config)
    phi = agent.ratio_features[batch.next_state]
    err = tgt - phi @ agent.params.ratio_weights
    loss = config.eta * float(np.mean(err ** 2))
    grad = -2.0 * config.eta * (err[:, None] * phi).mean(axis=0)
    return loss, grad


def ratio_loss(agent: Agent, sample: TransitionSample, config: TrainerConfig):
    batch = TransitionBatch(
        np.array([sample.state]), np.array([sample.action]), np.array([sample.next_state]),
        np.array([sample.reward]), np.array([sample.behavior_prob]), np.array([sample.target_prob]),
        np.array([sample.is_initial]),
    )
    return ratio_loss_batch(agent, batch, config)


def normalization_grad(agent: Agent, states) -> np.ndarray:
    from .learning import normalization_grad_estimate

    class _Head:
        def values(self, s):
            return agent.c(s)

        def grads(self, s):
            return agent.ratio_features[s]

    return normalization_grad_estimate(_Head(), states)


def td_errors(agent: Agent, batch: TransitionBatch, done: np.ndarray) -> np.ndarray:
    """``r + gamma max_a' Q_bar(s', a') - Q(s, a)`` with the bootstrap masked
    where ``done``."""
    q_next = agent.q(batch.next_state, target=True).max(axis=1)
    tgt = batch.reward + agent.gamma * np.where(done, 0.0, q_next)
    phi = agent.value_features[batch.state]
    pred = np.einsum("bk,bk->b", phi, agent.params.value_weights[:, batch.action].T)
    return tgt - pred


def value_direction(agent: Agent, batch: TransitionBatch, done: np.ndarray) -> np.ndarray:
    """Per-sample semi-gradient directions, shape ``(batch, k_value, n_actions)``."""
    delta = td_errors(agent, batch, done)
    out = np.zeros((len(delta),) + agent.params.value_weights.shape)
    out[np.arange(len(delta)), :, batch.action] = delta[:, None] * agent.value_features[batch.state]
    return out


def value_update(agent: Agent, batch: TransitionBatch, done: np.ndarray, config: TrainerConfig):
    """Semi-gradient Q-learning step towards ``r + gamma max_a' Q_bar(s', a')``.

    Per-sample directions are summed, so ``value_lr`` is a per-sample step.

    Returns the mean squared TD error and the per-sample absolute TD errors.
    """
    delta = td_errors(agent, batch, done)
    phi = agent.value_features[batch.state]
    grad = np.zeros_like(agent.params.value_weights)
    np.add.at(grad.T, batch.action, delta[:, None] * phi)
    agent.params.value_weights += config.value_lr * grad
    return float(np.mean(delta ** 2)), np.abs(delta)


def train_step(agent: Agent, config: TrainerConfig, rng: np.random.Generator) -> dict:
    """One update: a prioritized batch for the value head, an independent
    uniform batch for the ratio head, priority refresh of touched slots, and a
    target sync on the period boundary."""
    buf = agent.buffer
    if len(buf) < max(config.batch_size, 1):
        raise BufferNotWarm(f"buffer holds {len(buf)} < {config.batch_size} transitions")

    if config.priority_mode == "uniform":
        vbatch, vslots = buf.sample_uniform(config.batch_size, rng)
    else:
        vbatch, vslots = buf.sample_prioritized(config.batch_size, rng)
    value_loss, abs_td = value_update(agent, vbatch, buf.done[vslots], config)

    rloss = 0.0
    rslots = np.zeros(0, dtype=np.int64)
    if config.learn_ratio:
        if config.ratio_from_prioritized:
            rbatch, rslots = buf.sample_prioritized(config.batch_size, rng)
        else:
            rbatch, rslots = buf.sample_uniform(config.batch_size, rng)
        rloss, grad = ratio_loss_batch(agent, rbatch, config)
        if config.normalization_weight > 0:
            grad = grad + config.normalization_weight * normalization_grad(agent, rbatch.state)
        agent.params.ratio_weights -= config.ratio_lr * grad

    if config.priority_mode == "ratio":
        touched = np.unique(np.concatenate([vslots, rslots]))
        buf.set_priorities(touched, agent.c(buf.state[touched]))
    elif config.priority_mode == "td_error":
        buf.set_priorities(vslots, abs_td + config.td_priority_eps)

    agent.train_steps += 1
    if agent.train_steps % config.sync_period == 0:
        agent.params.sync()
    return {"ratio_loss": rloss, "value_loss": value_loss}


# ---------------------------------------------------------------------------
# Environment simulation and evaluation


@dataclass
class EpisodicTask:
    """Continuing tabular MDP read episodically: episodes begin in ``start``
    and end on entering ``terminal``, after which the simulator resets."""

    mdp: Mdp
    start: int
    terminal: int

    def episodic_transition(self) -> np.ndarray:
        P = np.array(self.mdp.transition)
        P[self.terminal] = 0.0
        return P


def evaluate(task: EpisodicTask, q: np.ndarray, epsilon: float, c: np.ndarray | None = None) -> tuple[float, float]:
    """Exact discounted return from the start state of the epsilon-greedy
    policy for ``q`` (terminal state absorbing, zero reward), and the mean
    ratio prediction under that policy's discounted visitation."""
    pi = greedy_policy(q, epsilon).probs
    P = np.einsum("sa,sat->st", pi, task.episodic_transition())
    r = np.einsum("sa,sa->s", pi, task.mdp.reward)
    r[task.terminal] = 0.0
    n = len(r)
    gamma = task.mdp.discount
    v = np.linalg.solve(np.eye(n) - gamma * P, r)
    mean_c = float("nan")
    if c is not None:
        d0 = np.zeros(n)
        d0[task.start] = 1.0
        visit = np.linalg.solve(np.eye(n) - gamma * P.T, d0)
        visit[task.terminal] = 0.0
        mean_c = float(visit @ c / visit.sum())
    return float(v[task.start]), mean_c


@dataclass
class ControlRun:
    rows: list = field(default_factory=list)
    agent: Agent | None = None
    status: str = "ok"

    @property
    def mean_eval_return(self) -> float:
        return float(np.mean([r["eval_return"] for r in self.rows])) if self.rows else float("nan")


METRIC_COLUMNS = ("seed", "step", "eval_return", "mean_c_eval", "ratio_loss", "value_loss", "mean_priority")


def run_control(task: EpisodicTask, behavior: Policy, config: TrainerConfig, seed: int) -> ControlRun:
    """Fill the replay memory with behavior-policy experience and train.

    Transitions leaving the terminal state (the reset back to ``start``) are
    flagged ``is_initial`` so the ratio head is anchored to 1 at the start.
    """
    mdp = task.mdp
    ss = np.random.SeedSequence(seed)
    env_rng, train_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    agent = make_agent(mdp.n_states, mdp.n_actions, behavior, mdp.discount, config)
    mu = agent.behavior
    run = ControlRun(agent=agent)
    s = task.start
    losses = {"ratio_loss": [], "value_loss": []}

    def record(step):
        ret, mean_c = evaluate(task, agent.q(), config.epsilon, agent.c())
        buf = agent.buffer
        run.rows.append({
            "seed": seed,
            "step": step,
            "eval_return": ret,
            "mean_c_eval": mean_c,
            "ratio_loss": float(np.mean(losses["ratio_loss"])) if losses["ratio_loss"] else 0.0,
            "value_loss": float(np.mean(losses["value_loss"])) if losses["value_loss"] else 0.0,
            "mean_priority": buf.summary()["mean_priority"],
        })
        losses["ratio_loss"].clear()
        losses["value_loss"].clear()

    cum_mu = np.cumsum(mu, axis=1)
    cum_P = np.cumsum(mdp.transition, axis=2)
    for step in range(1, config.steps + 1):
        u_a, u_s = env_rng.random(2)
        a = min(int(np.searchsorted(cum_mu[s], u_a, side="right")), mdp.n_actions - 1)
        if s == task.terminal:
            sp, r = task.start, 0.0
        else:
            sp = min(int(np.searchsorted(cum_P[s, a], u_s, side="right")), mdp.n_states - 1)
            r = float(mdp.reward[s, a])
        reset = s == task.terminal
        sample = TransitionSample(s, a, sp, r, float(mu[s, a]), 0.0, is_initial=reset)
        agent.buffer.push(sample, done=bool(sp == task.terminal or reset))
        agent.env_steps += 1
        s = sp

        if len(agent.buffer) >= max(config.learning_starts, config.batch_size) and step % config.train_every == 0:
            m = train_step(agent, config, train_rng)
            losses["ratio_loss"].append(m["ratio_loss"])
            losses["value_loss"].append(m["value_loss"])
            if not (np.all(np.isfinite(agent.params.value_weights)) and np.all(np.isfinite(agent.params.ratio_weights))):
                run.status = "diverged"
                record(step)
                return run
        if step % config.eval_every == 0:
            record(step)
    return run


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(agent: Agent, rng: np.random.Generator, path, config: TrainerConfig | None = None) -> None:
    doc = {
        "value_weights": agent.params.value_weights.tolist(),
        "ratio_weights": agent.params.ratio_weights.tolist(),
        "target_value_weights": agent.params.target_value_weights.tolist(),
        "target_ratio_weights": agent.params.target_ratio_weights.tolist(),
        "sync_period": agent.params.sync_period,
        "train_steps": agent.train_steps,
        "env_steps": agent.env_steps,
        "rng_state": rng.bit_generator.state,
        "buffer": agent.buffer.summary(),
    }
    if config is not None:
        doc["config"] = asdict(config)
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> tuple[AgentParams, dict]:
    """Returns restored parameters and the raw document (counters, RNG state,
    buffer summary). Buffer contents are not part of a checkpoint."""
    doc = json.loads(Path(path).read_text())
    params = AgentParams(
        np.asarray(doc["value_weights"]), np.asarray(doc["ratio_weights"]),
        np.asarray(doc["target_value_weights"]), np.asarray(doc["target_ratio_weights"]),
        int(doc["sync_period"]),
    )
    return params, doc


def restore_rng(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)
