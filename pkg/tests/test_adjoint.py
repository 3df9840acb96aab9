import numpy as np
import pytest
from scipy.integrate import solve_ivp

from bslq import (
    AffineInTerminalBM,
    BrownianEnsemble,
    Deterministic,
    SampledFunctional,
    TimeGrid,
    apply_cost_transform,
    assemble_drift_kernels,
    solve_affine_terminal,
    solve_gamma_direct,
    solve_lsmc_terminal,
)
from bslq.adjoint import RegressionBasis
from conftest import scalar_problem


def _phi(t):
    return 0.5 * (1 + np.exp(-2 * t))


def _example_oracle():
    """Gamma, K and q2 of the transformed example from scipy at tight tolerance."""
    def rhs(t, y):
        g, q2 = y
        k = (1 + g * _phi(t)) * _phi(t) / 5
        return [2 * g - (1 + g * _phi(t)) ** 2 / 5, (1 - k) * q2]

    return solve_ivp(rhs, (1.0, 0.0), [0.0, 1.0], rtol=1e-12, atol=1e-14, dense_output=True)


def test_example_kernels_against_independent_oracle(ex1_chain):
    sol = _example_oracle()
    gs, kernels, adj = ex1_chain["gs"], ex1_chain["kernels"], ex1_chain["adj"]
    t = gs.grid.nodes
    g_ref, q2_ref = sol.sol(t)
    assert np.max(np.abs(gs.gamma.values[:, 0, 0] - g_ref)) < 1e-9
    k_ref = (1 + g_ref * _phi(t)) * _phi(t) / 5
    assert np.max(np.abs(kernels.K.values[:, 0, 0] - k_ref)) < 1e-9
    assert np.max(np.abs(adj.q2[:, 0] - q2_ref)) < 1e-9
    # frozen goldens at t = 0
    assert kernels.K[0][0, 0] == pytest.approx(0.2194794332, abs=1e-9)
    assert gs.gamma[0][0, 0] == pytest.approx(0.0973971662, abs=1e-9)
    assert adj.q2[0, 0] == pytest.approx(0.4276421853, abs=1e-9)
    assert np.all(kernels.L1.values == 0.0) and np.all(kernels.L2.values == 0.0)


def test_example_q1_is_exponential(ex1_chain):
    adj = ex1_chain["adj"]
    t = adj.grid.nodes
    # q1' = A q1 with A = 1, q1(1) = 1
    assert np.max(np.abs(adj.q1[:, 0] - np.exp(t - 1))) < 1e-10
    assert np.all(adj.p == 0.0)


def test_kernel_zero_without_cross_weights():
    g = TimeGrid(1.0, 10)
    tp = apply_cost_transform(scalar_problem(g, A=0.5, B=1.0, C2=0.3, N2=1.0, R=2.0))
    k = assemble_drift_kernels(solve_gamma_direct(tp), tp)
    assert np.all(k.K.values == 0.0)


def test_kernels_vanish_with_zero_gamma():
    g = TimeGrid(1.0, 10)
    tp = apply_cost_transform(scalar_problem(g, A=0.5, C1=0.2, C2=0.3, S1=0.4, S2=0.7, N2=1.0, R=2.0))
    gs = solve_gamma_direct(tp)
    assert np.all(gs.gamma.values == 0.0)
    k = assemble_drift_kernels(gs, tp)
    assert np.all(k.L1.values == 0.0) and np.all(k.L2.values == 0.0)


def test_deterministic_terminal_has_no_loadings(ex1_chain):
    tp, gs, kernels = ex1_chain["tp"], ex1_chain["gs"], ex1_chain["kernels"]
    adj = solve_affine_terminal(tp, gs, kernels, Deterministic([2.0]))
    assert np.all(adj.q1 == 0.0) and np.all(adj.q2 == 0.0)
    # p' = (A - K) p, p(1) = 2
    ref = solve_ivp(lambda t, y: [(1 - (1 + _gamma_ref(t) * _phi(t)) * _phi(t) / 5) * y[0]],
                    (1.0, 0.0), [2.0], rtol=1e-12, atol=1e-14, dense_output=True)
    assert np.max(np.abs(adj.p[:, 0] - ref.sol(tp.grid.nodes)[0])) < 1e-8


_ORACLE = None


def _gamma_ref(t):
    global _ORACLE
    if _ORACLE is None:
        _ORACLE = _example_oracle()
    return _ORACLE.sol(t)[0]


def test_martingale_representation_case():
    g = TimeGrid(1.0, 20)
    tp = apply_cost_transform(scalar_problem(g, R=1.0))
    gs = solve_gamma_direct(tp)
    adj = solve_affine_terminal(tp, gs, assemble_drift_kernels(gs, tp), AffineInTerminalBM([0.0], [1.5], [0.0]))
    assert np.all(adj.q1 == 1.5) and np.all(adj.q2 == 0.0) and np.all(adj.p == 0.0)
    ens = BrownianEnsemble.generate(g, 50, 3)
    d = adj.on_ensemble(ens)
    assert np.allclose(d["phi"][..., 0], 1.5 * ens.W1)
    assert np.all(d["phi_hat"] == 0.0)


def test_affine_solver_rejects_sampled_terminal(ex1_chain):
    s = SampledFunctional(lambda w1, w2: w2[:, -1] ** 2, 1)
    with pytest.raises(TypeError):
        solve_affine_terminal(ex1_chain["tp"], ex1_chain["gs"], ex1_chain["kernels"], s)


def test_lsmc_deterministic_terminal_matches_affine(ex1_chain):
    tp, gs, kernels = ex1_chain["tp"], ex1_chain["gs"], ex1_chain["kernels"]
    xi = Deterministic([2.0])
    ens = BrownianEnsemble.generate(tp.grid, 2000, 5)
    lsmc = solve_lsmc_terminal(tp, gs, kernels, xi, ens)
    aff = solve_affine_terminal(tp, gs, kernels, xi)
    # regressions on a constant target return the constant
    assert np.ptp(lsmc.phi[:, 0, 0]) < 1e-10
    assert np.max(np.abs(lsmc.phi[:, :, 0].mean(0) - aff.p[:, 0])) < 5 * tp.grid.dt
    assert np.max(np.abs(lsmc.beta1)) < 1e-10 and np.max(np.abs(lsmc.beta2)) < 1e-10


def test_lsmc_terminal_is_exact(ex1_chain):
    tp, gs, kernels = ex1_chain["tp"], ex1_chain["gs"], ex1_chain["kernels"]
    ens = BrownianEnsemble.generate(tp.grid, 1000, 9)
    sol = solve_lsmc_terminal(tp, gs, kernels, ex1_chain["p"].terminal, ens)
    assert np.array_equal(sol.phi[:, -1, 0], ens.W1[:, -1] + ens.W2[:, -1])


def test_filter_measurable_terminal():
    # xi = W2(1)^2 carries no W1 loading; the filter equals xi at T
    g = TimeGrid(1.0, 50)
    from bslq import example_problem_1

    tp = apply_cost_transform(example_problem_1(g))
    gs = solve_gamma_direct(tp)
    kernels = assemble_drift_kernels(gs, tp)
    xi = SampledFunctional(lambda w1, w2: w2[:, -1] ** 2, 1, "W2(T)^2")
    ens = BrownianEnsemble.generate(g, 20000, 21)
    sol = solve_lsmc_terminal(tp, gs, kernels, xi, ens)
    assert np.max(np.abs(sol.phi_hat[:, -1, 0] - ens.W2[:, -1] ** 2)) < 1e-9
    rms = lambda x: float(np.sqrt(np.mean(x**2)))
    # regression noise only: small next to the genuine W2 loading
    assert rms(sol.beta1_hat) < 0.05 * rms(sol.beta2_hat)
    assert abs(sol.beta1.mean()) < 0.01


def test_lsmc_rejects_foreign_ensemble(ex1_chain):
    tp, gs, kernels = ex1_chain["tp"], ex1_chain["gs"], ex1_chain["kernels"]
    ens = BrownianEnsemble.generate(TimeGrid(1.0, 10), 100, 1)
    with pytest.raises(ValueError):
        solve_lsmc_terminal(tp, gs, kernels, ex1_chain["p"].terminal, ens)
    good = BrownianEnsemble.generate(tp.grid, 500, 1)
    sol = solve_lsmc_terminal(tp, gs, kernels, ex1_chain["p"].terminal, good)
    with pytest.raises(ValueError):
        sol.on_ensemble(BrownianEnsemble.generate(tp.grid, 500, 2))


def test_basis_shapes():
    b = RegressionBasis(2)
    w = np.linspace(-1, 1, 7)
    assert b.full(w, w).shape == (7, 6)
    assert b.filtered(w).shape == (7, 3)
    with pytest.raises(ValueError):
        RegressionBasis(-1)
