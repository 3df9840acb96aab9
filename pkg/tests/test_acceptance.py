"""Acceptance criteria, one test each; verdicts are echoed in the terminal summary."""

import time

import numpy as np
import pytest

from bslq import (
    BrownianEnsemble,
    Deterministic,
    TimeGrid,
    apply_cost_transform,
    assemble_closed_loop,
    assemble_drift_kernels,
    check_lambda_monotonicity,
    compare_adjoint_solutions,
    convexity_probe,
    ensemble_cost,
    example_problem_1,
    gamma_from_riccati_limit,
    inject_control,
    perturbation_expansion_check,
    random_polynomial_probes,
    reconstruct_optimal,
    simulate_x,
    simulate_xhat,
    solve_affine_terminal,
    solve_gamma_direct,
    solve_lsmc_terminal,
    solve_phi,
    stationarity_residual,
    sweep_lambda,
    tree_oracle,
    value_formula,
)
from conftest import XI_W1_W2, record_criterion, scalar_problem

PHI1 = 0.5 * (1.0 + np.exp(-2.0))


def _closed_loop(p, paths, seed, substeps=4):
    tp = apply_cost_transform(p, substeps)
    gs = solve_gamma_direct(tp, substeps)
    kernels = assemble_drift_kernels(gs, tp)
    adj = solve_affine_terminal(tp, gs, kernels, p.terminal)
    ens = BrownianEnsemble.generate(p.grid, paths, seed)
    clc = assemble_closed_loop(gs, adj, tp, ens)
    xh = simulate_xhat(clc, ens)
    sol = reconstruct_optimal(gs, adj, xh, clc, ens, simulate_x(clc, ens, xh))
    return dict(tp=tp, gs=gs, kernels=kernels, adj=adj, ens=ens, sol=sol)


def test_c01_convexity_constant():
    t0 = time.perf_counter()
    p = example_problem_1(TimeGrid(1.0, 200))
    rep = convexity_probe(p, random_polynomial_probes(1, 1.0, 100, seed=0))
    dt = time.perf_counter() - t0
    ok = rep.delta_hat >= 4.0 - 1e-6 and dt < 1.0
    assert record_criterion(1, "convexity constant", ok, f"min ratio {rep.delta_hat:.8f} over 100 probes, {dt:.3f}s")


def test_c02_phi_closed_form():
    p = example_problem_1(TimeGrid(1.0, 50))
    t0 = time.perf_counter()
    phi = solve_phi(p, substeps=4)
    dt = time.perf_counter() - t0
    err = abs(phi[-1][0, 0] - PHI1)
    ok = err < 1e-8 and dt < 0.1
    assert record_criterion(2, "Phi(1) closed form", ok, f"|error| {err:.2e} at N*substeps=200, {dt:.4f}s")


def test_c03_gamma_trivial_closed_form():
    worst = 0.0
    for steps in (10, 37, 200):
        g = TimeGrid(1.0, steps)
        gs = solve_gamma_direct(apply_cost_transform(scalar_problem(g, B=1.0, R=5.0)))
        worst = max(worst, float(np.max(np.abs(gs.gamma.values[:, 0, 0] - (1.0 - g.nodes) / 5.0))))
    assert record_criterion(3, "Gamma = (1-t)/5", worst < 1e-10, f"max error {worst:.2e} for N in (10, 37, 200)")


def test_c04_lambda_limit():
    t0 = time.perf_counter()
    tp = apply_cost_transform(example_problem_1(TimeGrid(1.0, 100)))
    _, diag = gamma_from_riccati_limit(tp, [64, 128, 256, 512])
    dt = time.perf_counter() - t0
    d = diag.distances
    ok = diag.strictly_decreasing and d[-1] < 10.0 * d[0] / 8.0 and dt < 5.0
    gaps = ", ".join(f"{x:.3e}" for x in d)
    assert record_criterion(4, "lambda limit", ok, f"gaps {gaps}, {dt:.2f}s")


def test_c05_monotonicity():
    tp = apply_cost_transform(example_problem_1(TimeGrid(1.0, 100)))
    entries, failures = sweep_lambda(tp, 1.0, 2.0, 8, 4)
    rep = check_lambda_monotonicity(entries)
    ok = not failures and len(rep.pairs) == 28 and rep.worst > -1e-8
    assert record_criterion(5, "lambda monotonicity", ok, f"worst min eigenvalue {rep.worst:.3e} over {len(rep.pairs)} pairs")


def test_c06_n_gamma_invertible():
    tp = apply_cost_transform(example_problem_1(TimeGrid(1.0, 200)))
    sv = solve_gamma_direct(tp).min_singular_n_gamma
    assert record_criterion(6, "N_Gamma invertibility", sv > 1e-6, f"min singular value {sv:.6f}")


def test_c07_terminal_exactness():
    p = example_problem_1(TimeGrid(1.0, 100)).with_terminal(XI_W1_W2)
    ch = _closed_loop(p, 4000, 3)
    sol, ens = ch["sol"], ch["ens"]
    xi = ens.W1[:, -1] + ens.W2[:, -1]
    y_err = float(np.max(np.abs(sol.Y[:, -1, 0] - xi)))
    lsmc = solve_lsmc_terminal(ch["tp"], ch["gs"], ch["kernels"], p.terminal, ens)
    phi_err = float(np.max(np.abs(lsmc.phi[:, -1, 0] - xi)))
    aff_phi = ch["adj"].p[-1, 0] + ch["adj"].q1[-1, 0] * ens.W1[:, -1] + ch["adj"].q2[-1, 0] * ens.W2[:, -1]
    phi_err = max(phi_err, float(np.max(np.abs(aff_phi - xi))))
    ok = y_err <= 1e-14 and phi_err <= 1e-14
    assert record_criterion(7, "terminal exactness", ok, f"max |Y(T)-xi| {y_err:.1e}, max |phi(T)-xi| {phi_err:.1e}")


def test_c08_stationarity():
    p = example_problem_1(TimeGrid(1.0, 100)).with_terminal(XI_W1_W2)
    ch = _closed_loop(p, 20000, 7)
    rho, _ = stationarity_residual(ch["sol"], ch["tp"])
    bad_rho, bad_se = stationarity_residual(inject_control(p, ch["sol"], 0.1), ch["tp"])
    ok = rho < 1e-20 and bad_rho > 5.0 * bad_se
    detail = f"rho {rho:.2e}; with 0.1 offset rho {bad_rho:.4e} (SE {bad_se:.1e})"
    assert record_criterion(8, "stationarity", ok, detail)


def test_c09_second_order_expansion():
    t0 = time.perf_counter()
    p = example_problem_1(TimeGrid(1.0, 100)).with_terminal(XI_W1_W2)
    ch = _closed_loop(p, 100_000, 7)
    rep = perturbation_expansion_check(p, ch["sol"], 1.0, [0.1, -0.1, 0.01, -0.01])
    dt = time.perf_counter() - t0
    worst = max(abs(r) / se if se > 0 else (0.0 if r == 0 else np.inf) for _, _, _, r, se in rep.rows)
    ok = rep.passed and dt < 30.0
    assert record_criterion(9, "second-order expansion", ok, f"worst |residual|/SE {worst:.2f}, J(0;1)={rep.j0:.6f}, {dt:.1f}s")


def test_c10_value_triple_agreement():
    t0 = time.perf_counter()
    p = example_problem_1(TimeGrid(1.0, 100)).with_terminal(XI_W1_W2)
    ch = _closed_loop(p, 100_000, 7)
    v = value_formula(ch["gs"], ch["adj"], ch["tp"]).value
    mc = ensemble_cost(p, ch["sol"])
    z = abs(v - mc.total) / mc.total_se
    tree = [tree_oracle(p, s).value for s in (2, 3, 4)]
    gaps = [abs(t - v) for t in tree]
    dt = time.perf_counter() - t0
    ok = z <= 3.0 and gaps[0] > gaps[1] > gaps[2] and dt < 60.0
    detail = (f"V {v:.6f}, MC {mc.total:.6f} ({z:.2f} SE), tree gaps "
              + ", ".join(f"{g:.4f}" for g in gaps) + f", {dt:.1f}s")
    assert record_criterion(10, "value agreement", ok, detail)


@pytest.mark.slow
def test_c11_cross_solver_adjoint():
    p = example_problem_1(TimeGrid(1.0, 50)).with_terminal(XI_W1_W2)
    tp = apply_cost_transform(p)
    gs = solve_gamma_direct(tp)
    kernels = assemble_drift_kernels(gs, tp)
    aff = solve_affine_terminal(tp, gs, kernels, p.terminal)
    ens = BrownianEnsemble.generate(p.grid, 100_000, 7)
    rows, _ = compare_adjoint_solutions(tp, gs, kernels, aff, ens, batches=20)
    z = []
    for _, _, lm, ex, se in rows:
        diff = np.abs(np.asarray(lm) - np.asarray(ex))
        se = np.asarray(se)
        z.extend(np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.inf)).ravel())
    worst = float(max(z))
    assert record_criterion(11, "affine vs LSMC adjoint", worst <= 3.0, f"worst |diff|/SE {worst:.2f} over {len(rows)} comparisons")


def test_c12_zero_cost_case():
    p = scalar_problem(TimeGrid(1.0, 50), A=1.0, B=1.0, C1=0.5, C2=0.3, N1=1.0, N2=2.0, R=1.0,
                       terminal=Deterministic([2.0]))
    ch = _closed_loop(p, 1000, 5)
    u_max = float(np.max(np.abs(ch["sol"].u)))
    v = value_formula(ch["gs"], ch["adj"], ch["tp"]).value
    mc = ensemble_cost(p, ch["sol"]).total
    tree = tree_oracle(p, 4).value
    ok = u_max == 0.0 and v == 0.0 and mc == 0.0 and tree == 0.0
    assert record_criterion(12, "zero-cost case", ok, f"max |u| {u_max}, V {v}, MC {mc}, tree {tree}")
