from __future__ import annotations

import numpy as np
import pytest

from copkit.envs import gridworld, random_ergodic
from copkit.errors import BufferNotWarm, ConfigError
from copkit.learning import TransitionSample
from copkit.trainer import (EpisodicTask, TrainerConfig, evaluate, greedy_policy, load_checkpoint, make_agent,
                            normalization_grad, ratio_loss, ratio_loss_batch, restore_rng, run_control,
                            save_checkpoint, train_step)


def agent_for(n=3, a=2, **cfg):
    config = TrainerConfig(**cfg)
    return make_agent(n, a, np.full((n, a), 1.0 / a), 0.9, config), config


def fill(agent, rng, n=64):
    ns, na = agent.behavior.shape
    for _ in range(n):
        s, act, sp = int(rng.integers(ns)), int(rng.integers(na)), int(rng.integers(ns))
        agent.buffer.push(TransitionSample(s, act, sp, float(rng.random()), 1.0 / na, 0.0), done=False)


def test_greedy_policy_examples():
    np.testing.assert_allclose(greedy_policy([[1.0, 3.0, 2.0]], 0.3).probs, [[0.1, 0.8, 0.1]])
    # ties resolve to the lowest index
    np.testing.assert_allclose(greedy_policy([[2.0, 2.0]], 0.0).probs, [[1.0, 0.0]])
    np.testing.assert_allclose(greedy_policy([[0.0, 5.0]], 1.0).probs, [[0.5, 0.5]])
    with pytest.raises(ValueError):
        greedy_policy([[0.0, 1.0]], 1.5)


def test_ratio_loss_zero_when_undiscounted_and_consistent():
    # c = 1 everywhere and pi_bar = mu: target = c_bar(s) rho = 1 = c(s')
    agent, cfg = agent_for(gamma_hat=1.0, epsilon=1.0)
    loss, grad = ratio_loss(agent, TransitionSample(0, 1, 2, 0.0, 0.5, 0.0), cfg)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, np.zeros(3))


def test_ratio_loss_initial_targets_one():
    agent, cfg = agent_for(gamma_hat=0.5)
    agent.params.ratio_weights[:] = [3.0, 2.0, 0.25]
    loss, grad = ratio_loss(agent, TransitionSample(2, 0, 1, 0.0, 0.5, 0.0, is_initial=True), cfg)
    assert loss == pytest.approx(cfg.eta * (1.0 - 2.0) ** 2)
    np.testing.assert_allclose(grad, [0.0, -2 * cfg.eta * (1.0 - 2.0), 0.0])


def test_ratio_loss_example_value():
    agent, cfg = agent_for(gamma_hat=0.5, epsilon=0.2)
    agent.params.target_ratio_weights[:] = [2.0, 1.0, 1.0]
    agent.params.ratio_weights[:] = [1.0, 0.5, 1.0]
    # Q_bar is all zeros so pi_bar(0|s) = 1 - eps + eps/2 = 0.9
    target = 0.5 * 2.0 * 0.9 / 0.5 + 0.5
    loss, _ = ratio_loss(agent, TransitionSample(0, 0, 1, 0.0, 0.5, 0.0), cfg)
    assert loss == pytest.approx(cfg.eta * (target - 0.5) ** 2)


def test_ratio_target_clips_negative_estimates():
    agent, cfg = agent_for(gamma_hat=0.5)
    agent.params.target_ratio_weights[:] = [-4.0, 1.0, 1.0]
    agent.params.ratio_weights[:] = [1.0, 0.5, 1.0]
    loss, _ = ratio_loss(agent, TransitionSample(0, 0, 1, 0.0, 0.5, 0.0), cfg)
    assert loss == 0.0  # target 0.5 * 0 + 0.5 matches c(s') = 0.5


def test_doubling_eta_doubles_loss_and_grad():
    rng = np.random.default_rng(0)
    agent, cfg = agent_for(n=4)
    agent.params.ratio_weights[:] = rng.exponential(size=4)
    fill(agent, rng)
    batch = agent.buffer.batch(np.arange(32))
    l1, g1 = ratio_loss_batch(agent, batch, cfg)
    l2, g2 = ratio_loss_batch(agent, batch, TrainerConfig(eta=2 * cfg.eta))
    assert l2 == pytest.approx(2 * l1)
    np.testing.assert_allclose(g2, 2 * g1)


def test_train_step_without_normalization_is_pure_gradient():
    rng = np.random.default_rng(1)
    agent, cfg = agent_for(n=4, batch_size=8, ratio_lr=0.5, priority_mode="uniform")
    fill(agent, rng)
    w0 = agent.params.ratio_weights.copy()
    v0 = agent.params.value_weights.copy()
    # replay the same draws to recover the ratio batch
    probe = np.random.default_rng(5)
    agent.buffer.sample_uniform(8, probe)
    rbatch, _ = agent.buffer.sample_uniform(8, probe)
    _, grad = ratio_loss_batch(agent, rbatch, cfg)
    train_step(agent, cfg, np.random.default_rng(5))
    np.testing.assert_allclose(agent.params.ratio_weights, w0 - 0.5 * grad)
    assert not np.array_equal(agent.params.value_weights, v0)


def test_train_step_with_normalization_adds_scaled_term():
    rng = np.random.default_rng(2)
    agent, cfg = agent_for(n=4, batch_size=8, priority_mode="uniform", normalization_weight=0.3)
    agent.params.ratio_weights[:] = [2.0, 0.1, 1.5, 0.7]
    fill(agent, rng)
    w0 = agent.params.ratio_weights.copy()
    probe = np.random.default_rng(9)
    agent.buffer.sample_uniform(8, probe)
    rbatch, _ = agent.buffer.sample_uniform(8, probe)
    _, grad = ratio_loss_batch(agent, rbatch, cfg)
    norm = normalization_grad(agent, rbatch.state)
    train_step(agent, cfg, np.random.default_rng(9))
    np.testing.assert_allclose(agent.params.ratio_weights, w0 - cfg.ratio_lr * (grad + 0.3 * norm))


def test_ratio_priorities_refreshed_from_current_estimate():
    rng = np.random.default_rng(3)
    agent, cfg = agent_for(n=4, batch_size=8)
    fill(agent, rng)
    train_step(agent, cfg, rng)
    buf = agent.buffer
    touched = np.flatnonzero(buf.tree.leaves[: len(buf)] != 1.0)
    c = agent.c()
    np.testing.assert_allclose(buf.tree.leaves[touched], np.maximum(c[buf.state[touched]], 0.0))


def test_sync_boundary():
    rng = np.random.default_rng(4)
    agent, cfg = agent_for(n=3, batch_size=4, sync_period=3)
    fill(agent, rng, 16)
    for _ in range(2):
        train_step(agent, cfg, rng)
    assert np.all(agent.params.target_value_weights == 0.0)
    train_step(agent, cfg, rng)
    np.testing.assert_array_equal(agent.params.target_value_weights, agent.params.value_weights)
    np.testing.assert_array_equal(agent.params.target_ratio_weights, agent.params.ratio_weights)
    train_step(agent, cfg, rng)
    assert not np.array_equal(agent.params.target_value_weights, agent.params.value_weights)


def test_buffer_not_warm():
    agent, cfg = agent_for(batch_size=8)
    fill(agent, np.random.default_rng(0), 7)
    with pytest.raises(BufferNotWarm):
        train_step(agent, cfg, np.random.default_rng(0))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    agent, cfg = agent_for(n=4, batch_size=4, sync_period=2)
    fill(agent, rng, 20)
    for _ in range(5):
        train_step(agent, cfg, rng)
    path = tmp_path / "ckpt.json"
    save_checkpoint(agent, rng, path, cfg)
    params, doc = load_checkpoint(path)
    for name in ("value_weights", "ratio_weights", "target_value_weights", "target_ratio_weights"):
        np.testing.assert_array_equal(getattr(params, name), getattr(agent.params, name))
    assert doc["train_steps"] == 5 and doc["sync_period"] == 2
    assert doc["config"]["batch_size"] == 4
    restored = restore_rng(doc["rng_state"])
    np.testing.assert_array_equal(restored.random(5), rng.random(5))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainerConfig(eta=0.0)
    with pytest.raises(ConfigError):
        TrainerConfig(priority_mode="sorted")
    with pytest.raises(ConfigError):
        TrainerConfig(normalization_weight=0.1, batch_size=1)
    with pytest.raises(ConfigError, match="learning_rate"):
        TrainerConfig.from_dict({"learning_rate": 0.1})
    assert TrainerConfig.from_dict({"eta": 0.5}).eta == 0.5


def test_evaluate_optimal_gridworld_return():
    env = gridworld(2, 2)
    task = EpisodicTask(env.mdp, 0, 3)
    # best policy reaches the goal in 2 moves: return gamma^1 * 1 (reward on entering)
    from copkit.envs import optimal_q

    ret, mean_c = evaluate(task, optimal_q(env.mdp), 0.0, np.ones(4))
    assert ret == pytest.approx(env.mdp.discount)
    assert mean_c == pytest.approx(1.0)


def test_run_control_small_grid_is_deterministic():
    env = gridworld(3, 3)
    task = EpisodicTask(env.mdp, 0, 8)
    cfg = TrainerConfig(steps=3000, eval_every=1000, learning_starts=200, sync_period=100, buffer_capacity=1000)
    a = run_control(task, env.behavior, cfg, seed=11)
    b = run_control(task, env.behavior, cfg, seed=11)
    assert a.status == "ok" and [r["step"] for r in a.rows] == [1000, 2000, 3000]
    assert a.rows == b.rows
    resets = a.agent.buffer.is_initial[: len(a.agent.buffer)]
    assert np.all(a.agent.buffer.state[: len(a.agent.buffer)][resets] == 8)


def test_priority_is_nonnegative_in_training():
    env = random_ergodic(5, 2, seed=0)
    agent = make_agent(5, 2, env.behavior.probs, 0.9, TrainerConfig(batch_size=8))
    agent.params.ratio_weights[:] = [-1.0, 2.0, 0.5, -0.2, 1.0]
    fill(agent, np.random.default_rng(0), 40)
    train_step(agent, TrainerConfig(batch_size=8, ratio_lr=1e-9), np.random.default_rng(1))
    assert np.all(agent.buffer.tree.leaves >= 0.0)
