"""Solve the scalar example step by step and check the answer three ways.

Run with ``python demos/walkthrough.py``. Takes about ten seconds.
"""

import numpy as np

from bslq import (
    AffineInTerminalBM,
    BrownianEnsemble,
    TimeGrid,
    apply_cost_transform,
    assemble_closed_loop,
    assemble_drift_kernels,
    ensemble_cost,
    example_problem_1,
    reconstruct_optimal,
    simulate_x,
    simulate_xhat,
    solve_affine_terminal,
    solve_gamma_direct,
    stationarity_residual,
    tree_oracle,
    value_formula,
)

grid = TimeGrid(1.0, 100)
problem = example_problem_1(grid).with_terminal(AffineInTerminalBM([0.0], [1.0], [1.0]))
print("terminal target: xi = W1(1) + W2(1)")

# Every weight except R is negative. The forward transform shifts the
# weights so that the ones that matter for the Riccati step become usable.
tp = apply_cost_transform(problem)
print(f"Phi(1) = {tp.phi[-1][0, 0]:.10f}  (closed form {0.5 * (1 + np.exp(-2)):.10f})")

# Gamma is the backward Riccati solution driving the filter feedback.
gs = solve_gamma_direct(tp)
print(f"Gamma(0) = {gs.gamma[0][0, 0]:.6f}, smallest singular value of I + Gamma N2 = {gs.min_singular_n_gamma:.4f}")

# The adjoint is exact here because xi is affine in the terminal Brownian values.
kernels = assemble_drift_kernels(gs, tp)
adj = solve_affine_terminal(tp, gs, kernels, problem.terminal)
print(f"adjoint mean p(0) = {adj.p[0, 0]:.6f}")

ens = BrownianEnsemble.generate(grid, 50_000, seed=7)
clc = assemble_closed_loop(gs, adj, tp, ens)
xhat = simulate_xhat(clc, ens)
sol = reconstruct_optimal(gs, adj, xhat, clc, ens, simulate_x(clc, ens, xhat))

rho, _ = stationarity_residual(sol, tp)
print(f"stationarity residual of the constructed control: {rho:.2e}")

value = value_formula(gs, adj, tp).value
mc = ensemble_cost(problem, sol)
print(f"value by formula      {value:.6f}")
print(f"value by Monte Carlo  {mc.total:.6f} +/- {mc.total_se:.6f}")
for steps in (2, 3, 4):
    tv = tree_oracle(problem, steps).value
    print(f"tree with {steps} steps   {tv:.6f}  (gap {tv - value:+.4f})")
