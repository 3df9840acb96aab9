"""Fixed-step RK4 integration of matrix ODEs on a :class:`~bslq.paths.TimeGrid`.

Right-hand sides are called as ``rhs(k, s, M)``: ``k`` is the grid cell and
``s`` the offset of the stage time inside that cell, so ``t = t_k + s``.
Coefficients are looked up with ``path.at(k, s)``, which applies the
left-endpoint convention to user data and Hermite interpolation to ODE
solutions.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import BlowUpError
from .paths import MatrixPath, TimeGrid

__all__ = [
    "MatrixPath",
    "TimeGrid",
    "integrate_matrix_ode",
    "symmetrize_path",
    "safe_inverse",
    "FORWARD",
    "BACKWARD",
]

FORWARD = "forward"
BACKWARD = "backward"

RCOND_FLOOR = 1e-10

Rhs = Callable[[int, float, np.ndarray], np.ndarray]


def safe_inverse(m, floor=RCOND_FLOOR, error=BlowUpError, what="matrix", scale: float = 0.0):
    """Invert ``m`` by LU with partial pivoting, refusing ill-conditioned input.

    Returns ``(inverse, rcond)`` with ``rcond`` the 1-norm reciprocal
    condition number. Raises ``error`` when ``rcond < floor``. A positive
    ``scale`` is a reference norm for ``m`` (``1`` for ``I + X``), so that a
    uniformly tiny matrix counts as near-singular even though its plain
    condition number is small.
    """
    m = np.asarray(m, dtype=float)
    try:
        inv = np.linalg.inv(m)
    except np.linalg.LinAlgError:
        raise error(f"{what} is singular") from None
    norm = max(np.linalg.norm(m, 1), scale) * np.linalg.norm(inv, 1)
    rcond = 1.0 / norm if norm > 0 and np.isfinite(norm) else 0.0
    if not np.isfinite(rcond) or rcond < floor:
        raise error(f"{what} is ill-conditioned (rcond={rcond:.3e} < {floor:.0e})")
    return inv, rcond


def _sym(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


@np.errstate(over="ignore", invalid="ignore")  # non-finite states are reported by check()
def integrate_matrix_ode(
    rhs: Rhs,
    boundary,
    direction: str,
    grid: TimeGrid,
    substeps: int = 4,
    symmetric: bool = False,
    name: str = "solution",
) -> MatrixPath:
    """Classical RK4 with ``substeps`` steps per grid cell.

    Parameters
    ----------
    rhs : callable
        ``rhs(k, s, M) -> dM/dt``.
    boundary : array_like
        ``M(0)`` for ``direction="forward"``, ``M(T)`` for ``"backward"``.
        The boundary node is assigned exactly.
    direction : {"forward", "backward"}
    grid : TimeGrid
    substeps : int
        RK4 steps inside each grid cell.
    symmetric : bool
        Symmetrize after every step (for symmetric matrix equations).

    Returns
    -------
    MatrixPath
        Node values in forward time order, with cubic Hermite cells built
        from the right-hand side at both ends of every cell.
    """
    if direction not in (FORWARD, BACKWARD):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if int(substeps) != substeps or substeps < 1:
        raise ValueError(f"substeps must be a positive integer, got {substeps!r}")
    m0 = np.array(boundary, dtype=float, ndmin=2)
    if not np.all(np.isfinite(m0)):
        raise BlowUpError(f"{name}: boundary value is not finite")
    if symmetric:
        if m0.shape[0] != m0.shape[1]:
            raise ValueError(f"{name}: symmetric integration needs a square boundary")
        m0 = _sym(m0)

    n_cells = grid.steps
    dt = grid.dt
    h = dt / substeps
    values = np.empty((n_cells + 1,) + m0.shape)
    left = np.empty((n_cells,) + m0.shape)
    right = np.empty((n_cells,) + m0.shape)

    def f(k, s, m):
        d = np.asarray(rhs(k, s, m), dtype=float)
        return _sym(d) if symmetric else d

    def check(m, node):
        if not np.all(np.isfinite(m)):
            raise BlowUpError(
                f"{name}: non-finite value at node {node} (t={node * dt:.6g})"
            )

    if direction == FORWARD:
        values[0] = m0
        for k in range(n_cells):
            m = values[k]
            for j in range(substeps):
                s = j * h
                k1 = f(k, s, m)
                k2 = f(k, s + 0.5 * h, m + 0.5 * h * k1)
                k3 = f(k, s + 0.5 * h, m + 0.5 * h * k2)
                k4 = f(k, s + h, m + h * k3)
                m = m + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                if symmetric:
                    m = _sym(m)
            check(m, k + 1)
            values[k + 1] = m
    else:
        values[n_cells] = m0
        for k in range(n_cells - 1, -1, -1):
            m = values[k + 1]
            for j in range(substeps):
                s = dt - j * h
                k1 = f(k, s, m)
                k2 = f(k, s - 0.5 * h, m - 0.5 * h * k1)
                k3 = f(k, s - 0.5 * h, m - 0.5 * h * k2)
                k4 = f(k, s - h, m - h * k3)
                m = m - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                if symmetric:
                    m = _sym(m)
            check(m, k)
            values[k] = m

    for k in range(n_cells):
        left[k] = f(k, 0.0, values[k])
        right[k] = f(k, dt, values[k + 1])
    return MatrixPath.hermite(grid, values, left, right)


def symmetrize_path(path: MatrixPath) -> tuple[MatrixPath, float]:
    """Replace every node (and cell polynomial) by its symmetric part.

    Returns the symmetrized path and the largest asymmetry removed.
    """
    p, q = path.shape
    if p != q:
        raise ValueError(f"cannot symmetrize a path of {p}x{q} matrices")
    removed = path.max_asymmetry()
    return MatrixPath(path.grid, _sym(path.values), _sym(path.cells)), removed
