"""How the regularized Riccati family approaches Gamma as lambda grows.

Run with ``python demos/lambda_family.py``.
"""

from bslq import (
    TimeGrid,
    apply_cost_transform,
    check_lambda_monotonicity,
    example_problem_1,
    gamma_from_riccati_limit,
    solve_gamma_direct,
    sweep_lambda,
)

tp = apply_cost_transform(example_problem_1(TimeGrid(1.0, 100)))

entries, failures = sweep_lambda(tp, 1.0, 2.0, 8, 4)
print("lambda   block margin")
for e in entries:
    print(f"{e.lam:7.1f}  {e.margin:.4f}")
for lam, reason in failures:
    print(f"{lam:7.1f}  rejected: {reason}")

# Larger lambda gives pointwise larger P1 and P2.
rep = check_lambda_monotonicity(entries)
print(f"smallest eigenvalue of P(lam2) - P(lam1) over all pairs: {rep.worst:.4f}")

# The inverse of P2 converges to Gamma at rate 1/lambda.
_, diag = gamma_from_riccati_limit(tp, [64, 128, 256, 512], reference=solve_gamma_direct(tp))
for lam, d in zip(diag.lams, diag.distances):
    print(f"lambda {lam:4.0f}: sup |P2^-1 - Gamma| = {d:.3e}, lambda * gap = {lam * d:.4f}")
