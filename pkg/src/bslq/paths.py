"""Time grids and matrix-valued paths sampled on them.

A :class:`MatrixPath` stores one matrix per grid node plus, for every grid
cell ``[t_k, t_{k+1}]``, a polynomial in the local offset ``s = t - t_k``.
The cell polynomials are what ODE right-hand sides evaluate at Runge-Kutta
stage times:

* user-supplied coefficients use the left-endpoint convention: on cell ``k``
  the polynomial is the constant ``values[k]``;
* solutions of ODEs carry a cubic Hermite interpolant built from node values
  and node derivatives, so that a derived coefficient (for example the cost
  transform kernel) keeps fourth-order accuracy when fed into another RK4
  solve.

Sums, products and transposes of paths act on both representations, so
derived quantities such as ``S3 + B^T Phi`` stay exact cell polynomials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TimeGrid", "MatrixPath"]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0 = t_0 < t_1 < ... < t_N = T``."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"horizon must be positive, got {self.horizon!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t

    def locate(self, t: float) -> tuple[int, float]:
        """Return ``(cell, offset)`` for time ``t``; ``t = T`` maps to the last cell."""
        if t < -1e-12 * self.horizon or t > self.horizon * (1 + 1e-12):
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        k = min(int(np.floor(t / self.dt + 1e-12)), self.steps - 1)
        k = max(k, 0)
        return k, t - k * self.dt

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * factor)


class MatrixPath:
    """Matrix-valued function on a :class:`TimeGrid`.

    Parameters
    ----------
    grid : TimeGrid
    values : array_like, shape (N+1, p, q)
        Node values.
    cells : array_like, shape (N, d+1, p, q), optional
        Per-cell polynomial coefficients in ascending powers of the local
        offset. Defaults to the left-endpoint convention.
    """

    def __init__(self, grid: TimeGrid, values, cells=None):
        values = np.asarray(values, dtype=float)
        if values.ndim != 3 or values.shape[0] != grid.steps + 1:
            raise ValueError(
                f"expected values of shape ({grid.steps + 1}, p, q), got {values.shape}"
            )
        if cells is None:
            cells = values[:-1, None, :, :]
        cells = np.asarray(cells, dtype=float)
        if cells.ndim != 4 or cells.shape[0] != grid.steps or cells.shape[2:] != values.shape[1:]:
            raise ValueError(f"cell coefficients of shape {cells.shape} do not match values")
        self.grid = grid
        self.values = values
        self.cells = cells

    # construction -----------------------------------------------------------

    @classmethod
    def constant(cls, grid: TimeGrid, matrix) -> "MatrixPath":
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(grid, np.broadcast_to(m, (grid.steps + 1,) + m.shape).copy())

    @classmethod
    def zeros(cls, grid: TimeGrid, shape) -> "MatrixPath":
        return cls.constant(grid, np.zeros(shape))

    @classmethod
    def hermite(cls, grid: TimeGrid, values, left_slopes, right_slopes) -> "MatrixPath":
        """Cubic Hermite cells from node values and one-sided cell-end slopes.

        ``left_slopes[k]`` and ``right_slopes[k]`` are the derivatives at the
        two ends of cell ``k``.
        """
        y = np.asarray(values, dtype=float)
        d0 = np.asarray(left_slopes, dtype=float)
        d1 = np.asarray(right_slopes, dtype=float)
        h = grid.dt
        y0, y1 = y[:-1], y[1:]
        c2 = (3.0 * (y1 - y0) / h - 2.0 * d0 - d1) / h
        c3 = (2.0 * (y0 - y1) / h + d0 + d1) / h**2
        cells = np.stack([y0, d0, c2, c3], axis=1)
        return cls(grid, y, cells)

    # evaluation -------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    @property
    def degree(self) -> int:
        return self.cells.shape[1] - 1

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, k):
        return self.values[k]

    def at(self, k: int, s: float) -> np.ndarray:
        """Evaluate cell ``k`` at local offset ``s`` (Horner)."""
        c = self.cells[k]
        if c.shape[0] == 1:
            return c[0]
        out = c[-1].copy()
        for j in range(c.shape[0] - 2, -1, -1):
            out = out * s + c[j]
        return out

    def at_time(self, t: float) -> np.ndarray:
        k, s = self.grid.locate(t)
        return self.at(k, s)

    # algebra ----------------------------------------------------------------

    def _check_grid(self, other: "MatrixPath"):
        if other.grid != self.grid:
            raise ValueError(f"grid mismatch: {self.grid} vs {other.grid}")

    @staticmethod
    def _pad(c, d):
        if c.shape[1] == d:
            return c
        pad = np.zeros((c.shape[0], d - c.shape[1]) + c.shape[2:])
        return np.concatenate([c, pad], axis=1)

    def __add__(self, other):
        if isinstance(other, MatrixPath):
            self._check_grid(other)
            d = max(self.cells.shape[1], other.cells.shape[1])
            return MatrixPath(
                self.grid,
                self.values + other.values,
                self._pad(self.cells, d) + self._pad(other.cells, d),
            )
        other = np.asarray(other, dtype=float)
        cells = self.cells.copy()
        cells[:, 0] += other
        return MatrixPath(self.grid, self.values + other, cells)

    __radd__ = __add__

    def __neg__(self):
        return MatrixPath(self.grid, -self.values, -self.cells)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scalar):
        scalar = float(scalar)
        return MatrixPath(self.grid, scalar * self.values, scalar * self.cells)

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, MatrixPath):
            self._check_grid(other)
            vals = self.values @ other.values
            da, db = self.cells.shape[1], other.cells.shape[1]
            cells = np.zeros((self.grid.steps, da + db - 1) + vals.shape[1:])
            for i in range(da):
                for j in range(db):
                    cells[:, i + j] += self.cells[:, i] @ other.cells[:, j]
            return MatrixPath(self.grid, vals, cells)
        other = np.asarray(other, dtype=float)
        return MatrixPath(self.grid, self.values @ other, self.cells @ other)

    def __rmatmul__(self, other):
        other = np.asarray(other, dtype=float)
        return MatrixPath(self.grid, other @ self.values, other @ self.cells)

    @property
    def T(self) -> "MatrixPath":
        return MatrixPath(self.grid, np.swapaxes(self.values, -1, -2), np.swapaxes(self.cells, -1, -2))

    # diagnostics ------------------------------------------------------------

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.cells)))

    def max_asymmetry(self) -> float:
        v = self.values
        if v.shape[1] != v.shape[2]:
            raise ValueError(f"path of {v.shape[1]}x{v.shape[2]} matrices is not square")
        return float(np.max(np.abs(v - np.swapaxes(v, -1, -2)), initial=0.0))

    def sup_distance(self, other: "MatrixPath") -> float:
        self._check_grid(other)
        return float(np.max(np.abs(self.values - other.values)))

    def min_eigenvalues(self) -> np.ndarray:
        """Smallest eigenvalue of the symmetric part at each node."""
        v = self.values
        return np.linalg.eigvalsh(0.5 * (v + np.swapaxes(v, -1, -2)))[:, 0]

    def __repr__(self):
        p, q = self.shape
        return f"MatrixPath({p}x{q}, N={self.grid.steps}, T={self.grid.horizon}, degree={self.degree})"
