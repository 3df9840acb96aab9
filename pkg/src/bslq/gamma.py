"""Decoupling kernel ``Gamma`` of the filtered Hamiltonian system.

``Gamma`` solves, backward from ``Gamma(T) = 0``::

    Gamma' = A Gamma + Gamma A^T - B_G R^{-1} B_G^T - C_G N_G^{-1} Gamma C_G^T

with ``N_G = I + Gamma N2``, ``B_G = B + Gamma S3^T`` and
``C_G = C2 + Gamma S2^T`` (weights of the transformed problem). The product
``N_G^{-1} Gamma`` is symmetric by the push-through identity.

The production path integrates this equation directly. The verification
path inverts the lambda-family Riccati solutions, ``Gamma_lam = P2_lam^{-1}``,
which decrease to ``Gamma`` as ``lam`` grows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BlowUpError, GammaSingularError
from .forward import LambdaFamilyEntry, TransformedProblem, solve_riccati_lambda
from .ode import BACKWARD, RCOND_FLOOR, integrate_matrix_ode, safe_inverse
from .paths import MatrixPath

__all__ = [
    "GammaSolution",
    "LambdaLimitDiagnostics",
    "ResidualReport",
    "gamma_rhs",
    "solve_gamma_direct",
    "gamma_from_riccati_limit",
    "validate_gamma",
    "gamma_uniqueness_check",
]

P2_RCOND_FLOOR = 1e-12
PSD_TOL = -1e-8


def _node_stage(grid, k):
    """Cell and offset used to evaluate coefficients at node ``k``."""
    return (k, 0.0) if k < grid.steps else (grid.steps - 1, grid.dt)


def gamma_rhs(tp: TransformedProblem, k: int, s: float, G: np.ndarray) -> np.ndarray:
    """Right-hand side of the Gamma equation at stage ``(k, s)``."""
    n = tp.n
    a = tp.A.at(k, s)
    bg = tp.B.at(k, s) + G @ tp.S3.at(k, s).T
    cg = tp.C2.at(k, s) + G @ tp.S2.at(k, s).T
    ng = np.eye(n) + G @ tp.N2.at(k, s)
    ng_inv, _ = safe_inverse(ng, RCOND_FLOOR, GammaSingularError, "N_Gamma = I + Gamma N2", 1.0)
    r_inv, _ = safe_inverse(tp.R.at(k, s), RCOND_FLOOR, BlowUpError, "R")
    return a @ G + G @ a.T - bg @ r_inv @ bg.T - cg @ (ng_inv @ G) @ cg.T


@dataclass(frozen=True)
class GammaSolution:
    """``Gamma`` with the derived paths used downstream.

    Attributes
    ----------
    gamma : MatrixPath
        Symmetric, positive semi-definite, zero at ``T``.
    n_gamma_inv : MatrixPath
        ``(I + Gamma N2)^{-1}`` at every node.
    b_gamma, c_gamma : MatrixPath
        ``B + Gamma S3^T`` and ``C2 + Gamma S2^T``.
    min_singular_n_gamma : float
        Smallest singular value of ``N_Gamma`` over all nodes (the empirical
        invertibility constant).
    min_eig : float
        Smallest eigenvalue of ``Gamma`` over all nodes.
    """

    gamma: MatrixPath
    n_gamma_inv: MatrixPath
    b_gamma: MatrixPath
    c_gamma: MatrixPath
    min_singular_n_gamma: float
    min_eig: float
    singular_values: np.ndarray = field(repr=False, default=None)

    @property
    def grid(self):
        return self.gamma.grid

    def n_gamma(self, tp: TransformedProblem) -> MatrixPath:
        return MatrixPath.constant(self.grid, np.eye(tp.n)) + self.gamma @ tp.N2


def _derived(tp: TransformedProblem, gamma: MatrixPath) -> GammaSolution:
    grid = tp.grid
    n = tp.n
    ng = MatrixPath.constant(grid, np.eye(n)) + gamma @ tp.N2
    inv = np.empty_like(ng.values)
    for k in range(grid.steps + 1):
        inv[k], _ = safe_inverse(ng.values[k], RCOND_FLOOR, GammaSingularError, f"N_Gamma at node {k}", 1.0)
    sv = np.linalg.svd(ng.values, compute_uv=False)[:, -1]
    return GammaSolution(
        gamma=gamma,
        n_gamma_inv=MatrixPath(grid, inv),
        b_gamma=tp.B + gamma @ tp.S3.T,
        c_gamma=tp.C2 + gamma @ tp.S2.T,
        min_singular_n_gamma=float(sv.min()),
        min_eig=float(gamma.min_eigenvalues().min()),
        singular_values=sv,
    )


def solve_gamma_direct(tp: TransformedProblem, substeps: int = 4, terminal=None) -> GammaSolution:
    """Integrate the Gamma equation backward from ``Gamma(T) = 0``.

    ``terminal`` replaces the zero terminal value; it exists for integrator
    tests and uniqueness probes only.

    Raises
    ------
    GammaSingularError
        If ``I + Gamma N2`` loses invertibility (reciprocal condition below
        ``1e-10``) at any stage.
    """
    g_T = np.zeros((tp.n, tp.n)) if terminal is None else np.atleast_2d(np.asarray(terminal, dtype=float))
    gamma = integrate_matrix_ode(
        lambda k, s, G: gamma_rhs(tp, k, s, G),
        g_T, BACKWARD, tp.grid, substeps, symmetric=True, name="Gamma",
    )
    return _derived(tp, gamma)


@dataclass(frozen=True)
class LambdaLimitDiagnostics:
    lams: tuple
    distances: tuple
    monotone: tuple  # one flag per consecutive pair: Gamma_lo - Gamma_hi is PSD
    entries: tuple = field(repr=False, default=())

    @property
    def strictly_decreasing(self) -> bool:
        d = self.distances
        return all(b < a for a, b in zip(d, d[1:]))


def gamma_from_riccati_limit(
    tp: TransformedProblem,
    lams: Sequence[float],
    reference: Optional[GammaSolution] = None,
    substeps: int = 4,
):
    """Approximate ``Gamma`` by ``P2_lam^{-1}`` for increasing ``lam``.

    Returns
    -------
    paths : list of MatrixPath
        ``Gamma_lam`` per ``lam``, equal to ``I / lam`` at ``T``.
    diagnostics : LambdaLimitDiagnostics
        Sup-norm distances to ``reference`` (solved directly when omitted)
        and PSD-order monotonicity flags.
    """
    lams = [float(x) for x in lams]
    if not lams:
        raise ValueError("empty lambda list")
    if any(b <= a for a, b in zip(lams, lams[1:])) or lams[0] <= 0:
        raise ValueError(f"lambda list must be positive and strictly increasing, got {lams}")
    if reference is None:
        reference = solve_gamma_direct(tp, substeps)
    grid = tp.grid
    n = tp.n
    paths, entries = [], []
    for lam in lams:
        entry: LambdaFamilyEntry = solve_riccati_lambda(tp, lam, substeps=substeps)
        inv = np.empty_like(entry.P2.values)
        for k in range(grid.steps):
            inv[k], _ = safe_inverse(entry.P2.values[k], P2_RCOND_FLOOR, BlowUpError, f"P2 at node {k}")
        inv[-1] = np.eye(n) / lam
        inv = 0.5 * (inv + np.swapaxes(inv, 1, 2))
        paths.append(MatrixPath(grid, inv))
        entries.append(entry)
    distances = tuple(path.sup_distance(reference.gamma) for path in paths)
    monotone = tuple(
        bool((lo - hi).min_eigenvalues().min() > PSD_TOL) for lo, hi in zip(paths, paths[1:])
    )
    return paths, LambdaLimitDiagnostics(tuple(lams), distances, monotone, tuple(entries))


@dataclass(frozen=True)
class ResidualReport:
    residuals: np.ndarray  # per-node max abs defect
    max_residual: float
    worst_node: int
    min_eig: float
    identity_error: float
    tolerance: float

    @property
    def psd(self) -> bool:
        return self.min_eig > PSD_TOL

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tolerance and self.psd and self.identity_error <= 1e-8


def validate_gamma(gs: GammaSolution, tp: TransformedProblem, tolerance: float = 1e-4) -> ResidualReport:
    """Defect of the Gamma equation at the nodes.

    The derivative is taken by central differences in the interior and by
    second-order one-sided differences at both ends and at nodes where a
    coefficient jumps (there ``Gamma`` is only continuous, and the right
    derivative is the one matching the left-endpoint convention). Also
    re-checks the PSD property and ``N_Gamma N_Gamma^{-1} = I``.
    """
    grid = gs.grid
    if grid.steps < 2:
        raise ValueError("residual check needs at least two grid cells")
    G = gs.gamma.values
    h = grid.dt
    d = np.empty_like(G)
    d[1:-1] = (G[2:] - G[:-2]) / (2 * h)
    d[0] = (-3 * G[0] + 4 * G[1] - G[2]) / (2 * h)
    d[-1] = (3 * G[-1] - 4 * G[-2] + G[-3]) / (2 * h)
    for k in _jump_nodes(tp):
        if k + 2 <= grid.steps:
            d[k] = (-3 * G[k] + 4 * G[k + 1] - G[k + 2]) / (2 * h)
    res = np.empty(grid.steps + 1)
    for k in range(grid.steps + 1):
        kk, s = _node_stage(grid, k)
        try:
            f = gamma_rhs(tp, kk, s, G[k])
        except (GammaSingularError, BlowUpError):
            res[k] = np.inf
            continue
        res[k] = np.max(np.abs(d[k] - f))
    ng = MatrixPath.constant(grid, np.eye(tp.n)) + gs.gamma @ tp.N2
    ident = ng.values @ gs.n_gamma_inv.values - np.eye(tp.n)
    worst = int(np.argmax(res))
    return ResidualReport(
        residuals=res,
        max_residual=float(res[worst]),
        worst_node=worst,
        min_eig=float(gs.gamma.min_eigenvalues().min()),
        identity_error=float(np.max(np.abs(ident))),
        tolerance=tolerance,
    )


def _jump_nodes(tp: TransformedProblem, rtol: float = 1e-9) -> list:
    """Interior nodes where a coefficient of the Gamma equation is discontinuous."""
    grid = tp.grid
    paths = (tp.A, tp.B, tp.C2, tp.S2, tp.S3, tp.N2, tp.R)
    jumps = []
    for k in range(1, grid.steps):
        for p in paths:
            left, right = p.at(k - 1, grid.dt), p.at(k, 0.0)
            if np.max(np.abs(left - right)) > rtol * (1.0 + np.max(np.abs(right))):
                jumps.append(k)
                break
    return jumps


def gamma_uniqueness_check(tp: TransformedProblem, eps: float = 1e-10, substeps: int = 4, tol: float = 1e-8):
    """Integrate from ``+eps I`` and ``-eps I`` terminals and compare.

    Returns ``(passed, sup_distance)``; the two solutions must agree within
    ``tol`` on the whole grid.
    """
    eye = np.eye(tp.n)
    up = solve_gamma_direct(tp, substeps, terminal=eps * eye).gamma
    down = solve_gamma_direct(tp, substeps, terminal=-eps * eye).gamma
    dist = up.sup_distance(down)
    return dist <= tol, dist
