"""Exact tree values against the continuous-time formula.

Run with ``python demos/oracle_convergence.py``.
"""

from bslq import (
    AffineInTerminalBM,
    TimeGrid,
    apply_cost_transform,
    assemble_drift_kernels,
    example_problem_1,
    solve_affine_terminal,
    solve_gamma_direct,
    tree_oracle,
    value_formula,
)

problem = example_problem_1(TimeGrid(1.0, 400)).with_terminal(AffineInTerminalBM([0.0], [1.0], [1.0]))
tp = apply_cost_transform(problem)
gs = solve_gamma_direct(tp)
adj = solve_affine_terminal(tp, gs, assemble_drift_kernels(gs, tp), problem.terminal)
value = value_formula(gs, adj, tp).value
print(f"formula value {value:.6f}")

# The tree has 4**steps leaves; steps = 5 stays under the size limit for n = 1.
prev = None
for steps in range(1, 6):
    r = tree_oracle(problem, steps)
    gap = r.value - value
    ratio = "" if prev is None else f"  gap ratio {prev / gap:.2f}"
    print(f"steps {steps}: tree {r.value:.6f}  gap {gap:+.5f}  Hessian margin {r.hessian_margin:.3f}{ratio}")
    prev = gap
