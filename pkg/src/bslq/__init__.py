"""Backward stochastic linear-quadratic control under partial information.

The package solves the cost transform, the forward Riccati family, the
``Gamma`` equation, the filtering adjoint BSDE and the closed-loop state
equations, then verifies the resulting control numerically.
"""

__version__ = "0.1.0"

from .errors import (
    BlowUpError,
    BslqError,
    ConfigError,
    DiscreteConvexityError,
    GammaSingularError,
    LambdaTooSmallError,
    OracleOverflowError,
    RegressionError,
    ValidationError,
    VerificationFailed,
)
from .paths import MatrixPath, TimeGrid
from .problem import (
    AffineInTerminalBM,
    Deterministic,
    LQProblem,
    SampledFunctional,
    build_problem,
    example_problem_1,
    problem_hash,
    validate_problem,
)
from .forward import (
    apply_cost_transform,
    check_lambda_monotonicity,
    solve_lyapunov_lambda,
    solve_phi,
    solve_riccati_lambda,
    sweep_lambda,
)
from .gamma import gamma_from_riccati_limit, gamma_uniqueness_check, solve_gamma_direct, validate_gamma
from .adjoint import (
    RegressionBasis,
    assemble_drift_kernels,
    compare_adjoint_solutions,
    solve_affine_terminal,
    solve_lsmc_terminal,
)
from .simulate import (
    BrownianEnsemble,
    assemble_closed_loop,
    reconstruct_optimal,
    simulate_x,
    simulate_xhat,
)
from .verify import (
    convexity_probe,
    cost_of_deterministic_control,
    ensemble_cost,
    inject_control,
    perturbation_expansion_check,
    random_polynomial_probes,
    stationarity_residual,
    value_formula,
)
from .oracle import tree_oracle
from .config import RunConfig, load_problem

__all__ = [name for name in dir() if not name.startswith("_")]
