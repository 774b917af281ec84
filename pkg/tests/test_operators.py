from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copkit.envs import episodic_instance, random_ergodic, reversible_instance
from copkit.errors import (BoundViolated, DegenerateMass, DimensionMismatch, Diverged, IllConditioned,
                           InvalidModel, PreconditionViolated, ZeroDenominator)
from copkit.mdp import (InducedChain, Mdp, Policy, discounted_stationary, episodic_visitation, induce_chain,
                        stationary_distribution, value_function)
from copkit.operators import (FeatureMap, WeightedProjector, approximation_error_bound, bellman_apply, concentration,
                              contraction_check, cop_apply, cop_matrix, discounted_cop_apply, discounted_ratio,
                              episodic_cop_apply, iterate_operator, normalized_cop_apply, projected_cop_iterate,
                              weighted_norm, weighted_project)


def instance(seed=0, n=5):
    env = random_ergodic(n, seed=seed)
    d_mu = stationary_distribution(induce_chain(env.mdp, env.behavior)).probs
    chain = induce_chain(env.mdp, env.target)
    return env, d_mu, chain


# --- features and projection -----------------------------------------------------


def test_rank_deficient_features():
    with pytest.raises(InvalidModel):
        FeatureMap([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])


def test_projector_condition():
    with pytest.raises(IllConditioned):
        WeightedProjector(FeatureMap([[1.0], [1.0]]), [0.0, 0.0])


def test_identity_projection():
    proj = WeightedProjector(FeatureMap.tabular(3), [0.2, 0.3, 0.5])
    x = np.array([1.0, -2.0, 3.5])
    np.testing.assert_allclose(weighted_project(proj, x), x, atol=1e-14)


def test_projection_fixes_span():
    rng = np.random.default_rng(0)
    phi = rng.normal(size=(6, 2))
    proj = WeightedProjector(FeatureMap(phi), rng.dirichlet(np.ones(6)))
    x = phi @ np.array([0.3, -1.2])
    np.testing.assert_allclose(weighted_project(proj, x), x, atol=1e-10)


def test_single_feature_closed_form():
    proj = WeightedProjector(FeatureMap([[1.0], [2.0]]), [0.5, 0.5])
    np.testing.assert_allclose(weighted_project(proj, [1.0, 0.0]), [0.2, 0.4], atol=1e-15)


def test_projection_is_weighted_least_squares():
    rng = np.random.default_rng(1)
    phi = rng.normal(size=(7, 3))
    d = rng.dirichlet(np.ones(7))
    x = rng.normal(size=7)
    w = np.sqrt(d)
    theta = np.linalg.lstsq(w[:, None] * phi, w * x, rcond=None)[0]
    np.testing.assert_allclose(weighted_project(WeightedProjector(FeatureMap(phi), d), x), phi @ theta, atol=1e-12)


# --- Bellman ---------------------------------------------------------------------


def test_bellman_fixed_point_and_gamma_zero():
    env, _, chain = instance(1)
    v = value_function(chain, 0.9)
    np.testing.assert_allclose(bellman_apply(chain, 0.9, v), v, atol=1e-10)
    np.testing.assert_allclose(bellman_apply(chain, 0.0, np.arange(5.0)), chain.expected_reward)


def test_bellman_iteration_rate():
    _, _, chain = instance(2)
    v_pi = np.linalg.solve(np.eye(5) - 0.9 * chain.transition, chain.expected_reward)
    v = np.zeros(5)
    for _ in range(500):
        v = bellman_apply(chain, 0.9, v)
    assert np.max(np.abs(v - v_pi)) <= 0.9 ** 500 * np.max(np.abs(v_pi)) + 1e-15


def test_bellman_dimension():
    _, _, chain = instance(0)
    with pytest.raises(DimensionMismatch):
        bellman_apply(chain, 0.9, np.zeros(4))


# --- COP operators ----------------------------------------------------------------


def test_cop_fixed_point():
    _, d_mu, chain = instance(3)
    c = stationary_distribution(chain).probs / d_mu
    np.testing.assert_allclose(cop_apply(chain, d_mu, c), c, atol=1e-12)


def test_cop_on_policy_ones():
    env = random_ergodic(4, seed=1)
    chain = induce_chain(env.mdp, env.behavior)
    d = stationary_distribution(chain).probs
    np.testing.assert_allclose(cop_apply(chain, d, np.ones(4)), np.ones(4), atol=1e-12)


def test_cop_matches_explicit_sum():
    rng = np.random.default_rng(4)
    P = rng.dirichlet(np.ones(3), size=3)
    d = rng.dirichlet(np.ones(3))
    c = rng.exponential(size=3)
    oracle = [sum(d[s] * P[s, sp] * c[s] for s in range(3)) / d[sp] for sp in range(3)]
    np.testing.assert_allclose(cop_apply(InducedChain(P), d, c), oracle, atol=1e-14)
    np.testing.assert_allclose(cop_matrix(InducedChain(P), d) @ c, oracle, atol=1e-14)


def test_cop_zero_denominator():
    with pytest.raises(ZeroDenominator):
        cop_apply(InducedChain(np.full((2, 2), 0.5)), [1.0, 0.0], [1.0, 1.0])


def test_normalized_cop():
    _, d_mu, chain = instance(5)
    ratio = stationary_distribution(chain).probs / d_mu
    np.testing.assert_allclose(normalized_cop_apply(chain, d_mu, ratio), ratio, atol=1e-12)
    c = np.random.default_rng(0).exponential(size=5)
    np.testing.assert_allclose(normalized_cop_apply(chain, d_mu, 3.7 * c), normalized_cop_apply(chain, d_mu, c),
                               rtol=1e-14)
    with pytest.raises(DegenerateMass):
        normalized_cop_apply(chain, d_mu, np.zeros(5))


def test_normalized_cop_iteration_10_states():
    env, d_mu, chain = instance(6, n=10)
    c = np.ones(10)
    for _ in range(10_000):
        c = normalized_cop_apply(chain, d_mu, c)
    np.testing.assert_allclose(c, stationary_distribution(chain).probs / d_mu, atol=1e-8, rtol=0)


def test_discounted_cop_special_cases():
    _, d_mu, chain = instance(7)
    c = np.random.default_rng(1).normal(size=5)
    np.testing.assert_array_equal(discounted_cop_apply(chain, d_mu, c, 0.0), np.ones(5))
    np.testing.assert_allclose(discounted_cop_apply(chain, d_mu, c, 1.0), cop_apply(chain, d_mu, c), atol=0)
    fixed = discounted_stationary(chain, d_mu, 0.8).probs / d_mu
    np.testing.assert_allclose(discounted_cop_apply(chain, d_mu, fixed, 0.8), fixed, atol=1e-10)


# --- iteration ----------------------------------------------------------------------


def test_iterate_discounted_limit():
    _, d_mu, chain = instance(8)
    c0 = np.random.default_rng(0).dirichlet(np.ones(5))
    traj = iterate_operator(lambda c: discounted_cop_apply(chain, d_mu, c, 0.9), c0, 2000, record_every=500)
    np.testing.assert_allclose(traj.final, discounted_ratio(chain, d_mu, 0.9), atol=1e-8)
    assert traj.steps_recorded == [0, 500, 1000, 1500, 2000]


def test_iterate_undiscounted_limit():
    _, d_mu, chain = instance(9)
    c0 = np.random.default_rng(1).dirichlet(np.ones(5))
    traj = iterate_operator(lambda c: cop_apply(chain, d_mu, c), c0, 10_000, record_every=10_000)
    C = d_mu @ c0
    np.testing.assert_allclose(traj.final, C * stationary_distribution(chain).probs / d_mu, atol=1e-6)


def test_iterate_identity():
    traj = iterate_operator(lambda c: c, np.array([1.0, 2.0]), 10)
    assert np.all(traj.residuals == 0)
    for it in traj.iterates:
        np.testing.assert_array_equal(it, [1.0, 2.0])


def test_iterate_divergence():
    with pytest.raises(Diverged) as info:
        iterate_operator(lambda c: 10 * c, np.ones(2), 100)
    assert info.value.step == 13  # 1e12 itself is not past the threshold
    traj = iterate_operator(lambda c: 10 * c, np.ones(2), 100, raise_on_divergence=False)
    assert traj.status == "diverged" and len(traj.residuals) == 13


def test_discounted_residuals_monotone_on_chain():
    from copkit.envs import chain as chain_env

    env = chain_env(5)
    d_mu = stationary_distribution(induce_chain(env.mdp, env.behavior)).probs
    ch = induce_chain(env.mdp, env.target)
    for g in (0.5, 0.9):
        traj = iterate_operator(lambda c: discounted_cop_apply(ch, d_mu, c, g), np.arange(1.0, 6.0), 200, weights=d_mu)
        r = traj.residuals
        assert np.all(np.diff(r[r > 1e-15]) < 0)


# --- projected iteration -------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_projected_symmetric_collapses(seed):
    inst = reversible_instance(seed)
    out = projected_cop_iterate(inst.chain, inst.d_mu, WeightedProjector.euclidean(FeatureMap(inst.features)),
                                np.ones(6), 100_000)
    assert out.outcome == "converged_to_zero"


def test_projected_identity_features_equal_plain_iteration():
    _, d_mu, chain = instance(10)
    proj = WeightedProjector.euclidean(FeatureMap.tabular(5))
    c0 = np.random.default_rng(2).exponential(size=5)
    out = projected_cop_iterate(chain, d_mu, proj, c0, 25)
    c = c0
    for _ in range(out.steps):
        c = cop_apply(chain, d_mu, c)
    np.testing.assert_allclose(out.final, c, rtol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_projected_random_never_nonzero_fixed_point(seed):
    rng = np.random.default_rng(100 + seed)
    _, d_mu, chain = instance(seed, n=6)
    ratio = stationary_distribution(chain).probs / d_mu
    phi = rng.normal(size=(6, 2))
    resid = ratio - phi @ np.linalg.lstsq(phi, ratio, rcond=None)[0]
    assert np.linalg.norm(resid) > 1e-3
    out = projected_cop_iterate(chain, d_mu, WeightedProjector(FeatureMap(phi), d_mu), np.ones(6), 100_000)
    assert out.outcome in ("converged_to_zero", "diverged")


def test_projected_ratio_in_span_is_fixed():
    _, d_mu, chain = instance(11)
    ratio = stationary_distribution(chain).probs / d_mu
    phi = np.column_stack([ratio, np.random.default_rng(0).normal(size=5)])
    out = projected_cop_iterate(chain, d_mu, WeightedProjector(FeatureMap(phi), d_mu), ratio, 50)
    assert out.outcome == "nonzero_fixed_point"


# --- concentration and contraction -------------------------------------------------


def test_concentration_two_state():
    chain = InducedChain(np.array([[0.9, 0.1], [0.2, 0.8]]))
    rep = concentration(chain, [0.5, 0.5], [2 / 3, 1 / 3], 1)
    assert rep.k_n == pytest.approx(1.1, abs=1e-15)
    assert rep.safe_gamma == pytest.approx(1.1 ** -0.5)


@pytest.mark.parametrize("n", [1, 2, 5])
def test_concentration_on_policy(n):
    env = random_ergodic(6, seed=2)
    chain = induce_chain(env.mdp, env.behavior)
    d = stationary_distribution(chain).probs
    rep = concentration(chain, d, d, n)
    assert rep.k_n == pytest.approx(1.0, abs=1e-12)
    assert rep.k_bound == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 5000), n=st.integers(1, 6))
def test_concentration_below_bound(seed, n):
    _, d_mu, chain = instance(seed % 50, n=5)
    d_pi = stationary_distribution(chain).probs
    rep = concentration(chain, d_mu, d_pi, n)
    assert rep.k_n <= rep.k_bound + 1e-12


def test_contraction_gamma_zero():
    _, d_mu, chain = instance(12)
    assert contraction_check(chain, d_mu, 0.0, 1, 20).measured == 0.0


def test_contraction_on_policy_bound_is_gamma_power():
    env = random_ergodic(5, seed=3)
    chain = induce_chain(env.mdp, env.behavior)
    d = stationary_distribution(chain).probs
    r = contraction_check(chain, d, 0.9, 2, 50)
    assert r.bound == pytest.approx(0.81, abs=1e-12)
    assert r.measured <= 0.81 + 1e-9


@pytest.mark.parametrize("n", [1, 2, 4])
def test_contraction_random_10_state(n):
    _, d_mu, chain = instance(13, n=10)
    r = contraction_check(chain, d_mu, 0.95, n, 100, rng=np.random.default_rng(n))
    assert r.measured <= r.bound + 1e-9


def test_contraction_violation_is_reported(monkeypatch):
    import copkit.operators as ops

    _, d_mu, chain = instance(14)
    real = ops.concentration
    monkeypatch.setattr(ops, "concentration", lambda *a: real(*a).__class__(a[3], 1e-6, 1.0, 1.0))
    with pytest.raises(BoundViolated):
        contraction_check(chain, d_mu, 0.9, 1, 10)


# --- approximation-error bound ------------------------------------------------------


def test_error_bound_zero_when_value_in_span():
    env, _, chain = instance(15, n=4)
    d_pi = stationary_distribution(chain).probs
    v = value_function(chain, 0.9)
    phi = np.column_stack([v, np.ones(4)])
    r = approximation_error_bound(chain, 0.9, WeightedProjector(FeatureMap(phi), d_pi), d_pi, v)
    assert r.bound == pytest.approx(0.0, abs=1e-10)
    assert r.actual == pytest.approx(0.0, abs=1e-10)


def test_error_bound_holds_on_random_instances():
    rng = np.random.default_rng(16)
    held = 0
    for seed in range(40):
        _, _, chain = instance(seed, n=5)
        d_pi = stationary_distribution(chain).probs
        proj = WeightedProjector(FeatureMap(rng.normal(size=(5, 2))), rng.dirichlet(np.ones(5)))
        try:
            r = approximation_error_bound(chain, 0.9, proj, d_pi, value_function(chain, 0.9))
        except PreconditionViolated:
            continue
        assert r.actual <= r.bound + 1e-9
        held += 1
    assert held >= 10


def test_error_bound_precondition_search():
    rng = np.random.default_rng(17)
    P = np.array([[0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.8, 0.1, 0.1]])
    mdp = Mdp(P[:, None, :], np.array([[0.0], [1.0], [0.0]]), 0.95)
    chain = induce_chain(mdp, Policy.uniform(3, 1))
    d_pi = stationary_distribution(chain).probs
    phi = FeatureMap([[1.0], [2.0], [0.5]])
    found = None
    for _ in range(500):
        d = rng.dirichlet(np.full(3, 0.3))
        try:
            approximation_error_bound(chain, 0.95, WeightedProjector(phi, d), d_pi, value_function(chain, 0.95))
        except PreconditionViolated as exc:
            found = exc
            break
    assert found is not None and found.norm * 0.95 >= 1.0


# --- episodic ---------------------------------------------------------------------------


def test_episodic_fixed_point_and_pin():
    inst = episodic_instance(5, seed=2)
    vm = episodic_visitation(inst.mdp, inst.behavior)
    vp = episodic_visitation(inst.mdp, inst.target)
    ratio = vp / vm
    np.testing.assert_allclose(episodic_cop_apply(inst.mdp, inst.target, vm, ratio), ratio, atol=1e-12)
    out = episodic_cop_apply(inst.mdp, inst.target, vm, np.full(5, 7.0))
    assert out[inst.mdp.start_state] == 1.0


def test_episodic_two_step_iteration():
    from copkit.mdp import EpisodicMdp

    P = np.zeros((3, 2, 3))
    P[0, 0, 1], P[0, 1, 2] = 1.0, 1.0
    P[1, :, 2] = 0.5  # then terminate
    emdp = EpisodicMdp(P, np.zeros((3, 2)), 0.9, start_state=0)
    mu, pi = Policy.uniform(3, 2), Policy([[0.8, 0.2], [0.5, 0.5], [0.5, 0.5]])
    vm, vp = episodic_visitation(emdp, mu), episodic_visitation(emdp, pi)
    c = np.ones(3)
    for _ in range(100):
        c = episodic_cop_apply(emdp, pi, vm, c)
    np.testing.assert_allclose(c, vp / vm, atol=1e-9)


def test_weighted_norm():
    assert weighted_norm([3.0, 4.0], [0.5, 0.5]) == pytest.approx(np.sqrt(12.5))
