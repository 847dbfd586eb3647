import math

import numpy as np
import pytest

from ctbn_meanfield.ode import (
    IntegratorConfig,
    QuadratureError,
    StepUnderflowError,
    evaluate,
    integrate,
    integrate_scaled,
    quadrature,
    quadrature_batch,
)


def decay(t, y):
    return -y


def test_tableau_consistency():
    # Stage abscissae must equal their row sums; both weight rows sum to 1.
    from fractions import Fraction

    from ctbn_meanfield.ode import _RK_A, _RK_B5, _RK_C, _RK_ERR

    for row, c in zip(_RK_A, _RK_C):
        assert math.isclose(row.sum(), c, rel_tol=1e-15)
    assert math.isclose(_RK_B5.sum(), 1.0, rel_tol=1e-15)
    b5 = [
        Fraction(16, 135),
        Fraction(0),
        Fraction(6656, 12825),
        Fraction(28561, 56430),
        Fraction(-9, 50),
        Fraction(2, 55),
    ]
    assert sum(b5) == 1
    # err = b5 - b4 row; b4 sums to 1 so err sums to 0
    assert abs(_RK_ERR.sum()) < 1e-15


def test_exponential_decay():
    sol = integrate(decay, 0.0, 1.0, np.array([1.0]))
    assert sol.final_value()[0] == pytest.approx(math.exp(-1.0), rel=1e-6)


def test_constant_solution_exact():
    sol = integrate(lambda t, y: np.zeros_like(y), 0.0, 3.0, np.array([2.5, -1.0]))
    assert np.all(sol.ys == np.array([2.5, -1.0]))
    assert np.all(sol.evaluate(1.7) == np.array([2.5, -1.0]))
    assert np.all(sol.evaluate_derivative(1.7) == 0.0)


def test_two_state_master_equation():
    Q = np.array([[-1.0, 1.0], [1.0, -1.0]])
    sol = integrate(lambda t, p: p @ Q, 0.0, 1.0, np.array([1.0, 0.0]))
    expected = np.array([(1 + math.exp(-2)) / 2, (1 - math.exp(-2)) / 2])
    assert sol.final_value() == pytest.approx(expected, rel=1e-6)


def test_backward_integration_inverts_forward():
    fwd = integrate(decay, 0.0, 1.0, np.array([1.0]))
    back = integrate(decay, 1.0, 0.0, fwd.final_value())
    assert back.direction == "backward"
    assert back.initial_value()[0] == fwd.final_value()[0]
    assert back.final_value()[0] == pytest.approx(1.0, rel=1e-6)


def test_evaluate_at_knots_is_exact():
    sol = integrate(decay, 0.0, 1.0, np.array([1.0]))
    for i in (0, len(sol.ts) // 2, -1):
        assert evaluate(sol, sol.ts[i])[0] == sol.ys[i][0]


def test_evaluate_linear_midpoint_exact():
    sol = integrate(lambda t, y: np.ones_like(y), 0.0, 1.0, np.array([0.0]))
    ts = np.linspace(0.0, 1.0, 17)
    assert sol.evaluate(ts)[:, 0] == pytest.approx(ts, abs=1e-14)


def test_dense_output_accuracy():
    sol = integrate(decay, 0.0, 1.0, np.array([1.0]))
    assert sol.evaluate(0.5)[0] == pytest.approx(math.exp(-0.5), abs=1e-6)
    ts = np.linspace(0.0, 1.0, 101)
    err = np.max(np.abs(sol.evaluate(ts)[:, 0] - np.exp(-ts)))
    assert err <= 10.0 * 1e-6


def test_evaluate_derivative_matches_rhs_at_knots():
    sol = integrate(decay, 0.0, 1.0, np.array([1.0]))
    mid = len(sol.ts) // 2
    assert sol.evaluate_derivative(sol.ts[mid])[0] == pytest.approx(
        -sol.ys[mid][0], rel=1e-12
    )


def test_evaluate_outside_span_raises():
    sol = integrate(decay, 0.0, 1.0, np.array([1.0]))
    with pytest.raises(ValueError):
        sol.evaluate(1.5)
    with pytest.raises(ValueError):
        sol.evaluate(-0.5)


def test_tolerance_scaling():
    # Tightening tolerances by 16x must cut the observed error at least 4x
    # (coarse high-order behavior check, run in the tolerance-limited regime).
    errs = []
    for tol in (1e-5, 1e-5 / 16.0):
        cfg = IntegratorConfig(rtol=tol, atol=tol * 1e-3, max_step_fraction=0.5)
        sol = integrate(decay, 0.0, 1.0, np.array([1.0]), cfg)
        errs.append(abs(sol.final_value()[0] - math.exp(-1.0)))
    assert errs[1] <= errs[0] / 4.0


def test_max_step_fraction_respected():
    sol = integrate(lambda t, y: np.zeros_like(y), 0.0, 16.0, np.array([1.0]))
    assert np.max(np.diff(sol.ts)) <= 16.0 / 16.0 + 1e-12


def test_step_underflow_reports_time():
    # 1/y blows up at t=1 from y(0)=sqrt(2), y = sqrt(2 - 2t).
    def rhs(t, y):
        return -1.0 / np.maximum(y, 1e-300)

    with pytest.raises(StepUnderflowError) as exc:
        integrate(rhs, 0.0, 2.0, np.array([math.sqrt(2.0)]))
    assert 0.9 < exc.value.t <= 1.1


def test_integrate_scaled_matches_plain_and_ledgers():
    # Strong decay forces renormalization through the lo threshold.
    sol = integrate_scaled(lambda t, y: -200.0 * y, 0.0, 2.0, np.array([1.0]))
    assert len(sol.ledger) >= 2
    v, lg = sol.evaluate_scaled(1.0)
    assert lg + math.log(abs(v[0])) == pytest.approx(-200.0, rel=1e-6)
    # Scale invariance of the representation
    shifted = sol.scaled_by(3.0)
    v2, lg2 = shifted.evaluate_scaled(1.0)
    assert lg2 - lg == pytest.approx(3.0)
    assert v2[0] == v[0]


def test_integrate_scaled_backward():
    sol = integrate_scaled(lambda t, y: 50.0 * y, 1.0, 0.0, np.array([1.0]), hi=1e10)
    v, lg = sol.evaluate_scaled(0.0)
    assert lg + math.log(v[0]) == pytest.approx(-50.0, rel=1e-6)


def test_quadrature_constant():
    assert quadrature(lambda t: 1.0, 0.0, 1.0) == pytest.approx(1.0, abs=1e-14)


def test_quadrature_cubic_exact():
    assert quadrature(lambda t: t * t, 0.0, 1.0) == pytest.approx(1.0 / 3.0, abs=1e-10)


def test_quadrature_exponential():
    assert quadrature(math.exp, 0.0, 1.0, tol=1e-8) == pytest.approx(
        math.e - 1.0, abs=1e-8
    )


def test_quadrature_depth_cap():
    with pytest.raises(QuadratureError) as exc:
        quadrature(lambda t: abs(t - 1 / 3) ** -0.9, 0.0, 1.0, tol=1e-12, max_depth=8)
    a, b = exc.value.interval
    assert a <= 1 / 3 <= b + 0.2


def test_quadrature_batch_matches_scalar():
    def f(ts):
        return np.stack([np.exp(ts), np.sin(ts)], axis=1)

    val, err = quadrature_batch(f, 0.0, 2.0, tol=1e-10)
    assert val[0] == pytest.approx(math.exp(2.0) - 1.0, abs=1e-8)
    assert val[1] == pytest.approx(1.0 - math.cos(2.0), abs=1e-8)
    assert np.all(err < 1e-8)


def test_quadrature_batch_with_seed_points():
    knots = np.linspace(0.0, 1.0, 37)
    val, _ = quadrature_batch(
        lambda ts: np.exp(ts)[:, None], 0.0, 1.0, tol=1e-10, initial_points=knots
    )
    assert val[0] == pytest.approx(math.e - 1.0, abs=1e-9)


def test_quadrature_batch_reversed_interval():
    val, _ = quadrature_batch(lambda ts: np.ones((len(ts), 1)), 1.0, 0.0)
    assert val[0] == pytest.approx(-1.0, abs=1e-12)


def test_integrator_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(rtol=-1.0)
    with pytest.raises(ValueError):
        IntegratorConfig(min_step_fraction=0.5, max_step_fraction=0.1)
