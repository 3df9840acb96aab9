"""Backward stochastic LQ problem data.

State equation (``W1``, ``W2`` independent scalar Brownian motions, the
controller sees only ``W2``)::

    dY = (A Y + B u + C1 Z1 + C2 Z2) dt + Z1 dW1 + Z2 dW2,   Y(T) = xi

Cost::

    J(xi; u) = E[ <G Y(0), Y(0)> + int_0^T ( <Q Y,Y> + 2<S1 Y,Z1> + 2<S2 Y,Z2>
               + 2<S3 Y,u> + <N1 Z1,Z1> + <N2 Z2,Z2> + <R u,u> ) dt ]

No definiteness is imposed on the weights; solvability is a property of the
whole functional (uniform convexity), probed in :mod:`bslq.verify`.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .paths import MatrixPath, TimeGrid

__all__ = [
    "Dimensions",
    "TimeGrid",
    "CoefficientSet",
    "WeightSet",
    "Deterministic",
    "AffineInTerminalBM",
    "SampledFunctional",
    "LQProblem",
    "Check",
    "ValidationReport",
    "sample_coefficient",
    "build_problem",
    "validate_problem",
    "example_problem_1",
    "problem_hash",
]

SYMMETRY_TOL = 1e-12

PathSpec = Union[np.ndarray, Sequence, MatrixPath, float]


@dataclass(frozen=True)
class Dimensions:
    n: int
    m: int

    def __post_init__(self):
        for name in ("n", "m"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"dimension {name} must be a positive integer, got {v!r}")


def sample_coefficient(spec: PathSpec, grid: TimeGrid) -> MatrixPath:
    """Sample a coefficient specification on ``grid``.

    ``spec`` may be

    * a scalar or 2-D array: constant path;
    * a list of ``(t, matrix)`` breakpoints: piecewise constant, each piece
      covering ``[t_j, t_{j+1})`` and the last one closed at ``T``;
    * a 3-D array with one matrix per node;
    * a :class:`MatrixPath` on the same grid (returned unchanged).

    Cell values follow the left-endpoint convention.
    """
    if isinstance(spec, MatrixPath):
        if spec.grid != grid:
            raise ValueError("coefficient path lives on a different grid")
        return spec
    if isinstance(spec, (list, tuple)) and spec and _is_breakpoint(spec[0]):
        times = np.array([float(t) for t, _ in spec])
        mats = [np.atleast_2d(np.asarray(m, dtype=float)) for _, m in spec]
        if np.any(np.diff(times) <= 0):
            raise ValueError("piecewise-constant breakpoints must be strictly increasing")
        if abs(times[0]) > 1e-12:
            raise ValueError("first breakpoint must be at t=0")
        if len({m.shape for m in mats}) != 1:
            raise ValueError("piecewise-constant pieces have inconsistent shapes")
        tol = 1e-12 * grid.horizon
        idx = np.searchsorted(times, grid.nodes + tol, side="right") - 1
        return MatrixPath(grid, np.stack([mats[i] for i in idx]))
    arr = np.asarray(spec, dtype=float)
    if arr.ndim <= 2:
        return MatrixPath.constant(grid, np.atleast_2d(arr))
    if arr.ndim == 3:
        if arr.shape[0] != grid.steps + 1:
            raise ValueError(
                f"node-sampled coefficient has {arr.shape[0]} nodes, grid has {grid.steps + 1}"
            )
        return MatrixPath(grid, arr)
    raise ValueError(f"cannot interpret coefficient of shape {arr.shape}")


def _is_breakpoint(item) -> bool:
    return (
        isinstance(item, (list, tuple))
        and len(item) == 2
        and np.ndim(item[0]) == 0
        and np.ndim(item[1]) >= 1
    )


@dataclass(frozen=True)
class CoefficientSet:
    A: MatrixPath
    B: MatrixPath
    C1: MatrixPath
    C2: MatrixPath


@dataclass(frozen=True)
class WeightSet:
    G: np.ndarray
    Q: MatrixPath
    S1: MatrixPath
    S2: MatrixPath
    S3: MatrixPath
    N1: MatrixPath
    N2: MatrixPath
    R: MatrixPath


# terminal conditions --------------------------------------------------------


@dataclass(frozen=True)
class Deterministic:
    """``xi = c``."""

    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c", np.atleast_1d(np.asarray(self.c, dtype=float)))

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def as_affine(self) -> "AffineInTerminalBM":
        z = np.zeros_like(self.c)
        return AffineInTerminalBM(self.c, z, z)

    def sample(self, W1, W2) -> np.ndarray:
        return np.broadcast_to(self.c, (np.shape(W1)[0], self.n)).copy()

    def second_moment(self, horizon: float) -> np.ndarray:
        return np.outer(self.c, self.c)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.c)))

    def describe(self) -> str:
        return f"deterministic c={self.c.tolist()}"


@dataclass(frozen=True)
class AffineInTerminalBM:
    """``xi = c + b1 W1(T) + b2 W2(T)``."""

    c: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("c", "b1", "b2"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if not (self.c.shape == self.b1.shape == self.b2.shape):
            raise ValueError("c, b1, b2 must have the same length")

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def as_affine(self) -> "AffineInTerminalBM":
        return self

    def sample(self, W1, W2) -> np.ndarray:
        W1 = np.asarray(W1)
        W2 = np.asarray(W2)
        return self.c + W1[:, -1, None] * self.b1 + W2[:, -1, None] * self.b2

    def second_moment(self, horizon: float) -> np.ndarray:
        return (
            np.outer(self.c, self.c)
            + horizon * np.outer(self.b1, self.b1)
            + horizon * np.outer(self.b2, self.b2)
        )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(np.concatenate([self.c, self.b1, self.b2]))))

    def describe(self) -> str:
        return f"affine c={self.c.tolist()} b1={self.b1.tolist()} b2={self.b2.tolist()}"


@dataclass(frozen=True)
class SampledFunctional:
    """``xi = fn(W1_path, W2_path)`` evaluated per Monte-Carlo path.

    ``fn`` receives arrays of shape ``(M, N+1)`` and must return ``(M, n)``.
    """

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    n: int
    label: str = "sampled"

    def sample(self, W1, W2) -> np.ndarray:
        xi = np.asarray(self.fn(np.asarray(W1), np.asarray(W2)), dtype=float)
        if xi.ndim == 1:
            xi = xi[:, None]
        if xi.shape != (np.shape(W1)[0], self.n):
            raise ValueError(f"terminal functional returned shape {xi.shape}, expected (M, {self.n})")
        if not np.all(np.isfinite(xi)) or not np.all(np.isfinite(xi.var(axis=0))):
            raise ValueError("terminal functional is not square-integrable on the sample")
        return xi

    def is_finite(self) -> bool:
        return True

    def describe(self) -> str:
        return f"sampled {self.label}"


TerminalCondition = Union[Deterministic, AffineInTerminalBM, SampledFunctional]


# problem --------------------------------------------------------------------


@dataclass(frozen=True)
class LQProblem:
    """Coefficients, weights, grid and (optionally) terminal data.

    Build instances with :func:`build_problem`, which samples and symmetrizes
    the inputs; the raw specifications are kept in ``specs`` so the problem
    can be re-sampled on another grid with :meth:`regrid`.
    """

    dims: Dimensions
    grid: TimeGrid
    coeffs: CoefficientSet
    weights: WeightSet
    terminal: Optional[TerminalCondition] = None
    specs: dict = field(default_factory=dict, repr=False, compare=False)

    # flat attribute access used by every solver
    A = property(lambda self: self.coeffs.A)
    B = property(lambda self: self.coeffs.B)
    C1 = property(lambda self: self.coeffs.C1)
    C2 = property(lambda self: self.coeffs.C2)
    G = property(lambda self: self.weights.G)
    Q = property(lambda self: self.weights.Q)
    S1 = property(lambda self: self.weights.S1)
    S2 = property(lambda self: self.weights.S2)
    S3 = property(lambda self: self.weights.S3)
    N1 = property(lambda self: self.weights.N1)
    N2 = property(lambda self: self.weights.N2)
    R = property(lambda self: self.weights.R)

    @property
    def n(self) -> int:
        return self.dims.n

    @property
    def m(self) -> int:
        return self.dims.m

    def with_terminal(self, terminal: TerminalCondition) -> "LQProblem":
        if terminal is not None and terminal.n != self.n:
            raise ValueError(f"terminal condition has dimension {terminal.n}, problem has n={self.n}")
        return replace(self, terminal=terminal)

    def regrid(self, steps: int) -> "LQProblem":
        if not self.specs:
            raise ValueError("problem was not built from specifications; cannot regrid")
        grid = TimeGrid(self.grid.horizon, steps)
        return build_problem(grid, terminal=self.terminal, **self.specs)


_COEFF_NAMES = ("A", "B", "C1", "C2")
_WEIGHT_NAMES = ("Q", "S1", "S2", "S3", "N1", "N2", "R")
_SYMMETRIC = ("Q", "N1", "N2", "R")


def _symmetrize_ingest(name, path: MatrixPath) -> MatrixPath:
    v = path.values
    if v.shape[1] != v.shape[2]:
        return path
    asym = float(np.nanmax(np.abs(v - np.swapaxes(v, 1, 2)), initial=0.0))
    if asym == 0.0:
        return path
    if asym > SYMMETRY_TOL:
        warnings.warn(f"{name} is asymmetric by {asym:.3e}; symmetrizing", stacklevel=3)
    return MatrixPath(
        path.grid,
        0.5 * (v + np.swapaxes(v, 1, 2)),
        0.5 * (path.cells + np.swapaxes(path.cells, 2, 3)),
    )


def build_problem(
    grid: TimeGrid,
    *,
    A,
    B,
    C1=None,
    C2=None,
    G=None,
    Q=None,
    S1=None,
    S2=None,
    S3=None,
    N1=None,
    N2=None,
    R,
    terminal: Optional[TerminalCondition] = None,
) -> LQProblem:
    """Sample coefficient specs on ``grid`` and assemble an :class:`LQProblem`.

    Omitted cross terms and weights default to zero. Symmetric weights are
    symmetrized on ingest (with a warning above ``1e-12`` asymmetry).
    """
    a = sample_coefficient(A, grid)
    b = sample_coefficient(B, grid)
    n = a.shape[0]
    m = b.shape[1]
    dims = Dimensions(n, m)
    zero_nn = np.zeros((n, n))
    zero_mn = np.zeros((m, n))
    raw = dict(
        A=A, B=B,
        C1=zero_nn if C1 is None else C1,
        C2=zero_nn if C2 is None else C2,
        G=zero_nn if G is None else G,
        Q=zero_nn if Q is None else Q,
        S1=zero_nn if S1 is None else S1,
        S2=zero_nn if S2 is None else S2,
        S3=zero_mn if S3 is None else S3,
        N1=zero_nn if N1 is None else N1,
        N2=zero_nn if N2 is None else N2,
        R=R,
    )
    paths = {k: sample_coefficient(v, grid) for k, v in raw.items() if k != "G"}
    for name in _SYMMETRIC:
        paths[name] = _symmetrize_ingest(name, paths[name])
    g = np.atleast_2d(np.asarray(raw["G"], dtype=float))
    if g.shape[0] == g.shape[1]:
        asym = float(np.nanmax(np.abs(g - g.T), initial=0.0))
        if asym > SYMMETRY_TOL:
            warnings.warn(f"G is asymmetric by {asym:.3e}; symmetrizing", stacklevel=2)
        if asym > 0:
            g = 0.5 * (g + g.T)
    coeffs = CoefficientSet(*(paths[k] for k in _COEFF_NAMES))
    weights = WeightSet(G=g, **{k: paths[k] for k in _WEIGHT_NAMES})
    problem = LQProblem(dims, grid, coeffs, weights, None, specs=raw)
    if terminal is not None:
        problem = problem.with_terminal(terminal)
    return problem


def example_problem_1(grid: TimeGrid) -> LQProblem:
    """The scalar indefinite example on ``[0, 1]``.

    ``A = B = 1``, ``C1 = C2 = 0``, ``G = Q = N1 = N2 = -1``, all cross terms
    zero and ``R = 5``. The cost is uniformly convex with constant 4 even
    though every weight except ``R`` is negative. The terminal condition is
    left unset.
    """
    if abs(grid.horizon - 1.0) > 1e-12:
        raise ValueError(f"the example lives on [0, 1]; grid horizon is {grid.horizon}")
    return build_problem(
        grid,
        A=[[1.0]], B=[[1.0]], C1=[[0.0]], C2=[[0.0]],
        G=[[-1.0]], Q=[[-1.0]],
        S1=[[0.0]], S2=[[0.0]], S3=[[0.0]],
        N1=[[-1.0]], N2=[[-1.0]], R=[[5.0]],
    )


# validation -----------------------------------------------------------------


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in self.checks]
        return "\n".join(lines)


def validate_problem(p: LQProblem) -> ValidationReport:
    """Shape, symmetry and finiteness checks derived from the standing hypotheses.

    Uniform convexity is not checked here (see :func:`bslq.verify.convexity_probe`).
    """
    n, m = p.n, p.m
    expected = dict(
        A=(n, n), B=(n, m), C1=(n, n), C2=(n, n),
        Q=(n, n), S1=(n, n), S2=(n, n), S3=(m, n), N1=(n, n), N2=(n, n), R=(m, m),
    )
    checks = []
    for name, shape in expected.items():
        path = getattr(p, name)
        ok = path.shape == shape and path.grid == p.grid
        checks.append(Check(f"shape:{name}", ok, f"{path.shape} expected {shape}"))
    g_ok = p.G.shape == (n, n)
    checks.append(Check("shape:G", g_ok, f"{p.G.shape} expected {(n, n)}"))
    if p.terminal is not None:
        checks.append(Check("shape:terminal", p.terminal.n == n, f"n={p.terminal.n} expected {n}"))

    for name in ("G",) + _SYMMETRIC:
        v = p.G[None] if name == "G" else getattr(p, name).values
        if v.shape[-1] != v.shape[-2]:
            checks.append(Check(f"symmetry:{name}", False, "not square"))
            continue
        with np.errstate(invalid="ignore"):
            asym = float(np.nanmax(np.abs(v - np.swapaxes(v, -1, -2)), initial=0.0))
        checks.append(Check(f"symmetry:{name}", asym <= SYMMETRY_TOL, f"max asymmetry {asym:.3e}"))

    for name in _COEFF_NAMES + _WEIGHT_NAMES:
        v = getattr(p, name).values
        bad = np.argwhere(~np.isfinite(v))
        detail = "all finite" if bad.size == 0 else f"first non-finite entry at node {bad[0][0]} (t={p.grid.nodes[bad[0][0]]:.6g})"
        checks.append(Check(f"finite:{name}", bad.size == 0, detail))
    checks.append(Check("finite:G", bool(np.all(np.isfinite(p.G))), ""))
    if p.terminal is not None:
        checks.append(Check("finite:terminal", p.terminal.is_finite(), p.terminal.describe()))
    return ValidationReport(tuple(checks))


def problem_hash(p: LQProblem) -> str:
    """SHA-256 over the sampled data, grid and terminal description."""
    h = hashlib.sha256()
    h.update(f"{p.grid.horizon!r}:{p.grid.steps}:{p.n}:{p.m}".encode())
    for name in _COEFF_NAMES + _WEIGHT_NAMES:
        h.update(name.encode())
        h.update(np.ascontiguousarray(getattr(p, name).values).tobytes())
    h.update(np.ascontiguousarray(p.G).tobytes())
    if p.terminal is not None:
        h.update(p.terminal.describe().encode())
    return h.hexdigest()
