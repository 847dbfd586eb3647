import math

import numpy as np
import pytest
from scipy.linalg import expm

from conftest import random_rate_matrix, single_chain
from ctbn_meanfield.model import amalgamate, build_ising_chain
from ctbn_meanfield.ode import quadrature_batch
from ctbn_meanfield.oracle import (
    compute_exact_posterior,
    exact_log_likelihood,
    exact_posterior_marginals,
    exact_sufficient_stats,
    project_component_marginal,
    project_stats,
)

SYM2 = np.array([[-1.0, 1.0], [1.0, -1.0]])


def test_log_likelihood_zero_horizon_limit():
    joint = single_chain(SYM2)
    assert abs(exact_log_likelihood(joint, 0, 0, 1e-8)) < 1e-6


def test_log_likelihood_two_state_analytic():
    joint = single_chain(SYM2)
    expected = math.log((1 + math.exp(-2.0)) / 2.0)
    assert exact_log_likelihood(joint, 0, 0, 1.0) == pytest.approx(expected, abs=1e-9)


def test_log_likelihood_ising_vs_dense_expm():
    model = build_ising_chain(2, 1.0, 1.0)
    joint = amalgamate(model)
    space = model.state_space
    e0 = space.joint_index((0, 1))
    eT = space.joint_index((1, 0))
    expected = math.log(expm(joint.dense() * 1.0)[e0, eT])
    assert exact_log_likelihood(joint, e0, eT, 1.0) == pytest.approx(expected, abs=1e-8)


def test_log_likelihood_random_models_vs_expm():
    rng = np.random.default_rng(42)
    for _ in range(8):
        n = int(rng.integers(2, 17))
        q = random_rate_matrix(rng, n)
        joint = single_chain(q)
        e0 = int(rng.integers(n))
        eT = int(rng.integers(n))
        t = float(rng.uniform(0.3, 2.0))
        expected = math.log(expm(q * t)[e0, eT])
        assert exact_log_likelihood(joint, e0, eT, t) == pytest.approx(
            expected, abs=1e-7
        )


def test_posterior_marginals_boundaries():
    joint = single_chain(SYM2)
    marg = exact_posterior_marginals(joint, 0, 1, 1.0, [0.0, 1.0])
    assert marg[0] == pytest.approx([1.0, 0.0], abs=1e-9)
    assert marg[1] == pytest.approx([0.0, 1.0], abs=1e-9)


def test_posterior_marginals_normalized_and_likelihood_constant():
    model = build_ising_chain(3, 0.8, 1.5)
    joint = amalgamate(model)
    post = compute_exact_posterior(joint, 0, 5, 1.0)
    times = np.linspace(0.0, 1.0, 9)
    marg = post.marginals(times)
    assert np.allclose(marg.sum(axis=1), 1.0, atol=1e-6)
    lnl = post.pointwise_likelihood(times)
    assert np.max(np.abs(lnl - post.log_likelihood)) < 1e-6 * (
        1 + abs(post.log_likelihood)
    )


def test_posterior_midpoint_symmetric_two_state():
    joint = single_chain(SYM2)
    marg = exact_posterior_marginals(joint, 0, 0, 1.0, [0.5])[0]
    a0 = (1 + math.exp(-1.0)) / 2.0
    a1 = (1 - math.exp(-1.0)) / 2.0
    expected = a0 * a0 / (a0 * a0 + a1 * a1)
    assert marg[0] == pytest.approx(expected, abs=1e-8)


def test_ising_antisymmetric_evidence_midpoint_half():
    model = build_ising_chain(2, 1.0, 1.0)
    space = model.state_space
    joint = amalgamate(model)
    e0 = space.joint_index((0, 1))
    eT = space.joint_index((1, 0))
    marg = exact_posterior_marginals(joint, e0, eT, 1.0, [0.5])[0]
    comp0 = project_component_marginal(marg, space, 0)
    assert comp0[1] == pytest.approx(0.5, abs=1e-7)


def test_sufficient_stats_time_conservation_and_symmetry():
    joint = single_chain(SYM2)
    stats = exact_sufficient_stats(joint, 0, 0, 1.0)
    assert stats.occupancy.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(stats.occupancy >= 0)
    m = stats.transition_matrix()
    assert m[0, 1] == pytest.approx(m[1, 0], abs=1e-8)


def test_sufficient_stats_vs_riemann():
    joint = single_chain(SYM2)
    post = compute_exact_posterior(joint, 0, 0, 1.0)
    stats = exact_sufficient_stats(joint, 0, 0, 1.0)
    ts = np.linspace(0.0, 1.0, 100_001)
    a, la = post.forward.evaluate_scaled(ts)
    b, lb = post.backward.evaluate_scaled(ts)
    w = np.exp(la + lb - post.log_likelihood)
    integrand = a[:, 0] * b[:, 1] * w
    riemann = np.trapezoid(integrand, ts)
    assert stats.transition_matrix()[0, 1] == pytest.approx(riemann, abs=1e-6)


def test_posterior_master_equation_residual():
    # The posterior is Markov with rates q_xy * beta_y / beta_x; finite
    # differences of the marginals must satisfy its master equation.
    rng = np.random.default_rng(3)
    q = random_rate_matrix(rng, 3)
    joint = single_chain(q)
    post = compute_exact_posterior(joint, 0, 1, 1.0)
    h = 1e-3
    for t in (0.25, 0.5, 0.75):
        p_minus, p_0, p_plus = post.marginals([t - h, t, t + h])
        dp = (p_plus - p_minus) / (2 * h)
        b, _ = post.backward.evaluate_scaled(t)
        rates = q * (b[None, :] / b[:, None])
        np.fill_diagonal(rates, 0.0)
        np.fill_diagonal(rates, -rates.sum(axis=1))
        residual = np.max(np.abs(dp - p_0 @ rates))
        assert residual < 1e-3


def test_occupancy_derivative_recovers_marginal():
    joint = single_chain(SYM2)
    post = compute_exact_posterior(joint, 0, 1, 1.0)

    def cumulative(t):
        vals, _ = quadrature_batch(
            lambda ts: post.marginals(ts), 0.0, t, tol=1e-10
        )
        return vals

    h = 1e-3
    t = 0.6
    deriv = (cumulative(t + h) - cumulative(t - h)) / (2 * h)
    assert deriv == pytest.approx(post.marginals([t])[0], abs=1e-4)


def test_project_component_marginal_cases():
    model = build_ising_chain(2, 1.0, 1.0)
    space = model.state_space
    ind = np.zeros(4)
    ind[space.joint_index((1, 0))] = 1.0
    assert np.array_equal(project_component_marginal(ind, space, 0), [0.0, 1.0])
    assert np.array_equal(project_component_marginal(ind, space, 1), [1.0, 0.0])
    uniform = np.full(4, 0.25)
    assert np.allclose(project_component_marginal(uniform, space, 0), [0.5, 0.5])
    p1 = np.array([0.3, 0.7])
    p2 = np.array([0.9, 0.1])
    prod = np.kron(p1, p2)
    assert np.allclose(project_component_marginal(prod, space, 0), p1)
    assert np.allclose(project_component_marginal(prod, space, 1), p2)


def test_project_stats_consistency():
    model = build_ising_chain(2, 0.6, 1.2)
    joint = amalgamate(model)
    space = model.state_space
    stats = exact_sufficient_stats(
        joint, space.joint_index((0, 1)), space.joint_index((1, 0)), 1.0
    )
    factored = project_stats(stats, model)
    for i in range(2):
        assert factored.occupancy[i].sum() == pytest.approx(1.0, abs=1e-6)
        # Parent-resolved stats marginalize back to the plain ones.
        assert np.allclose(
            factored.parent_occupancy[i].sum(axis=0), factored.occupancy[i]
        )
        assert np.allclose(
            factored.parent_transitions[i].sum(axis=0), factored.transitions[i]
        )
    total_jumps = sum(f.sum() for f in factored.transitions)
    assert total_jumps == pytest.approx(stats.transition_counts.sum(), abs=1e-10)


def test_unobserved_end_gives_filtered_marginals():
    joint = single_chain(SYM2)
    post = compute_exact_posterior(joint, 0, None, 1.0)
    assert post.log_likelihood == pytest.approx(0.0, abs=1e-9)
    marg = post.marginals([1.0])[0]
    expected = np.array([(1 + math.exp(-2.0)) / 2.0, (1 - math.exp(-2.0)) / 2.0])
    assert marg == pytest.approx(expected, abs=1e-8)
