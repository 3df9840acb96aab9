import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bslq import (
    Deterministic,
    LambdaTooSmallError,
    TimeGrid,
    apply_cost_transform,
    build_problem,
    check_lambda_monotonicity,
    example_problem_1,
    solve_lyapunov_lambda,
    solve_phi,
    solve_riccati_lambda,
    sweep_lambda,
)
from bslq.verify import cost_of_deterministic_control
from conftest import scalar_problem

PHI1 = 0.5 * (1 + np.exp(-2.0))


def test_phi_closed_form_example():
    g = TimeGrid(1.0, 50)
    phi = solve_phi(example_problem_1(g))
    assert np.max(np.abs(phi.values[:, 0, 0] - 0.5 * (1 + np.exp(-2 * g.nodes)))) < 1e-8
    assert abs(phi[-1][0, 0] - PHI1) < 1e-8


def test_phi_zero_when_no_state_weights():
    g = TimeGrid(1.0, 20)
    p = scalar_problem(g, A=0.7, B=1.0, N1=2.0, N2=3.0, S1=0.1, R=1.0)
    tp = apply_cost_transform(p)
    assert np.all(tp.phi.values == 0.0)
    for name in ("N1", "N2", "S1", "S2", "S3"):
        assert np.array_equal(getattr(tp, name).values, getattr(p, name).values)


def test_phi_linear_when_drift_vanishes():
    g = TimeGrid(1.0, 10)
    tp = apply_cost_transform(scalar_problem(g, Q=0.8, B=1.0))
    assert np.allclose(tp.phi.values[:, 0, 0], -0.8 * g.nodes, atol=1e-14)


def test_transformed_example_weights():
    tp = apply_cost_transform(example_problem_1(TimeGrid(1.0, 100)))
    assert abs(tp.N1[0][0, 0]) < 1e-15
    assert abs(tp.N1[-1][0, 0] - (-1 + PHI1)) < 1e-8
    assert abs(tp.N1[-1][0, 0] + 0.432332) < 1e-6
    assert np.all(tp.Q.values == 0.0) and np.all(tp.G == 0.0)


def test_terminal_correction_affine():
    from bslq import AffineInTerminalBM

    tp = apply_cost_transform(example_problem_1(TimeGrid(1.0, 100)))
    corr = tp.terminal_correction(AffineInTerminalBM([0.5], [1.0], [1.0]))
    assert corr == pytest.approx(tp.phi[-1][0, 0] * (0.25 + 2.0), rel=1e-14)


def test_transform_identity_on_costs():
    # J_orig(xi; v) = J_transformed(xi; v) - <Phi(T) xi, xi> for any control
    g = TimeGrid(1.0, 20000)
    p = example_problem_1(g)
    tp = apply_cost_transform(p, substeps=1)
    xi = Deterministic([0.7])
    v = lambda t: np.array([np.cos(3 * t)])
    j = cost_of_deterministic_control(p, v, xi, substeps=1).total
    jt = cost_of_deterministic_control(tp, v, xi, substeps=1).total
    assert abs(j - (jt - tp.phi[-1][0, 0] * 0.49)) < 1e-8


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.floats(-2, 2))
def test_transform_identity_random_two_dim(vals, x0):
    g = TimeGrid(1.0, 400)
    a = np.array(vals[:4]).reshape(2, 2)
    q = np.array([[vals[4], 0.2], [0.2, vals[5]]])
    p = build_problem(g, A=a, B=[[1.0], [0.5]], Q=q, G=np.eye(2) * 0.3, N1=np.eye(2), N2=np.eye(2), R=[[1.0]])
    tp = apply_cost_transform(p)
    xi = Deterministic([x0, 1.0])
    v = lambda t: np.array([1.0 - t])
    j = cost_of_deterministic_control(p, v, xi).total
    jt = cost_of_deterministic_control(tp, v, xi).total
    corr = float(xi.c @ tp.phi[-1] @ xi.c)
    assert abs(j - (jt - corr)) < 1e-5 * (1 + abs(j))


def test_lyapunov_closed_form():
    g = TimeGrid(1.0, 50)
    p1 = solve_lyapunov_lambda(apply_cost_transform(scalar_problem(g, A=0.6, B=1.0)), 3.0)
    assert np.allclose(p1.values[:, 0, 0], 3.0 * np.exp(1.2 * (1 - g.nodes)), rtol=1e-9)


def test_lyapunov_constant_without_drift():
    g = TimeGrid(1.0, 10)
    p1 = solve_lyapunov_lambda(apply_cost_transform(scalar_problem(g, B=1.0)), 2.5)
    assert np.all(p1.values == 2.5)


def test_lyapunov_example_value():
    tp = apply_cost_transform(example_problem_1(TimeGrid(1.0, 100)))
    assert solve_lyapunov_lambda(tp, 10.0)[0][0, 0] == pytest.approx(10 * np.e**2, rel=1e-9)
    assert solve_lyapunov_lambda(tp, 10.0)[0][0, 0] == pytest.approx(73.8906, abs=1e-4)


def test_riccati_coincides_with_lyapunov_without_coupling():
    g = TimeGrid(1.0, 40)
    tp = apply_cost_transform(scalar_problem(g, A=0.3, Q=0.2, N1=1.0, N2=1.0, R=1.0))
    e = solve_riccati_lambda(tp, 5.0)
    assert np.allclose(e.P1.values, e.P2.values, rtol=1e-12, atol=0)


def test_riccati_scalar_closed_form():
    # P' = (b^2 / r) P^2, P(T) = lam  ->  1/P(t) = 1/lam + (b^2/r)(T - t)
    g = TimeGrid(1.0, 100)
    b, r, lam = 1.5, 2.0, 4.0
    tp = apply_cost_transform(scalar_problem(g, B=b, R=r, N1=1.0, N2=1.0))
    e = solve_riccati_lambda(tp, lam)
    exact = 1.0 / (1 / lam + b * b / r * (1 - g.nodes))
    assert np.max(np.abs(e.P2.values[:, 0, 0] - exact)) < 1e-9


def test_example_lambda_64_admissible():
    tp = apply_cost_transform(example_problem_1(TimeGrid(1.0, 100)))
    e = solve_riccati_lambda(tp, 64.0)
    assert e.blockPositivityMargin > 0
    assert e.node_margins.shape == (101,)


def test_example_monotone_64_128():
    tp = apply_cost_transform(example_problem_1(TimeGrid(1.0, 100)))
    rep = check_lambda_monotonicity([solve_riccati_lambda(tp, 64.0), solve_riccati_lambda(tp, 128.0)])
    assert rep.passed
    assert rep.pairs[0][2] > 0 and rep.pairs[0][3] > 0


def test_monotonicity_preconditions():
    tp = apply_cost_transform(example_problem_1(TimeGrid(1.0, 20)))
    e = solve_riccati_lambda(tp, 64.0)
    with pytest.raises(ValueError):
        check_lambda_monotonicity([e])
    assert check_lambda_monotonicity([e, e]).passed  # equal lambdas are skipped


def test_lambda_too_small_is_reported():
    tp = apply_cost_transform(scalar_problem(TimeGrid(1.0, 20), B=1.0, R=-1.0))
    with pytest.raises(LambdaTooSmallError, match="increase lambda"):
        solve_riccati_lambda(tp, 10.0)
    entries, failures = sweep_lambda(tp, 1.0, 2.0, 4)
    assert entries == [] and len(failures) == 4


def test_negative_lambda_rejected():
    tp = apply_cost_transform(example_problem_1(TimeGrid(1.0, 10)))
    with pytest.raises(ValueError):
        solve_riccati_lambda(tp, -1.0)
    with pytest.raises(ValueError):
        sweep_lambda(tp, 1.0, 1.0, 3)


def test_sweep_separates_admissible_values():
    # N1 + P1 > 0 needs lam > 1 at T when N1 = -1
    tp = apply_cost_transform(scalar_problem(TimeGrid(1.0, 20), B=1.0, R=1.0, N1=-1.0, N2=1.0))
    entries, failures = sweep_lambda(tp, 0.5, 2.0, 4)
    assert sorted(failures) == [0.5, 1.0]
    assert [e.lam for e in entries] == [2.0, 4.0]
