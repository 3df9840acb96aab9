"""Compare the exact affine adjoint with the regression (LSMC) solver.

The affine solver only handles terminal data that is affine in W1(T) and
W2(T). The regression solver handles general functionals, so on affine data
the two must agree up to Monte-Carlo error. Takes about ten seconds.
"""

from bslq import (
    AffineInTerminalBM,
    BrownianEnsemble,
    SampledFunctional,
    TimeGrid,
    apply_cost_transform,
    assemble_drift_kernels,
    compare_adjoint_solutions,
    example_problem_1,
    solve_affine_terminal,
    solve_gamma_direct,
    solve_lsmc_terminal,
)

grid = TimeGrid(1.0, 50)
problem = example_problem_1(grid).with_terminal(AffineInTerminalBM([0.0], [1.0], [1.0]))
tp = apply_cost_transform(problem)
gs = solve_gamma_direct(tp)
kernels = assemble_drift_kernels(gs, tp)
exact = solve_affine_terminal(tp, gs, kernels, problem.terminal)
ens = BrownianEnsemble.generate(grid, 40_000, seed=7)

rows, _ = compare_adjoint_solutions(tp, gs, kernels, exact, ens, batches=20)
print("node  process     lsmc        exact       z")
for k, name, est, ref, se in rows:
    z = float(abs(est[0] - ref[0]) / se[0]) if se[0] > 0 else 0.0
    print(f"{k:4d}  {name:10s} {est[0]: .6f}  {ref[0]: .6f}  {z:.2f}")

# A nonlinear target only the regression solver can handle.
xi = SampledFunctional(lambda w1, w2: w2[:, -1] ** 2, 1, "W2(1)^2")
sol = solve_lsmc_terminal(tp, gs, kernels, xi, ens)
print(f"\nxi = W2(1)^2: mean phi(0) = {sol.phi[:, 0, 0].mean():.6f}")
