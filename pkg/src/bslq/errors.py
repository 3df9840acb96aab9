"""Exception hierarchy. Each class carries the exit status used by the CLI."""


class BslqError(Exception):
    """Base class for pipeline failures."""

    exit_code = 1
    tag = "error"


class ConfigError(BslqError, ValueError):
    exit_code = 2
    tag = "config"


class ValidationError(BslqError, ValueError):
    exit_code = 3
    tag = "validation"


class LambdaTooSmallError(BslqError):
    """Block positivity of the forward Riccati family fell below the floor."""

    exit_code = 4
    tag = "lambda-too-small"


class GammaSingularError(BslqError):
    """``I + Gamma N2`` became numerically singular."""

    exit_code = 5
    tag = "n-gamma-singular"


class BlowUpError(BslqError, FloatingPointError):
    """Non-finite values or an ill-conditioned inverse during integration."""

    exit_code = 6
    tag = "numeric-blow-up"


class RegressionError(BlowUpError):
    """Rank-deficient least-squares regression in the Monte-Carlo BSDE solver."""

    tag = "regression-rank-deficient"


class VerificationFailed(BslqError):
    exit_code = 7
    tag = "verification-failed"


class DiscreteConvexityError(VerificationFailed):
    """Tree-oracle Hessian is not positive definite."""

    tag = "discrete-convexity-failed"


class OracleOverflowError(ConfigError):
    tag = "oracle-overflow"
