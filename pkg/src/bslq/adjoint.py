"""Adjoint BSDE with filtering.

The pair ``(phi, beta1, beta2)`` solves, with ``phi(T) = xi``::

    dphi = ( A phi + C1 beta1 + C2 beta2
             - K phi_hat + L1 beta1_hat + L2 beta2_hat ) dt
           + beta1 dW1 + beta2 dW2

where hats denote conditional expectations given the ``W2`` history and::

    K  = B_G R^{-1} S3 + C_G N_G^{-1} Gamma S2
    L1 = Gamma S1^T
    L2 = C_G N_G^{-1} - C2

Two solvers are provided. For ``xi = c + b1 W1(T) + b2 W2(T)`` the ansatz
``phi = p + q1 W1 + q2 W2`` turns the equation into three linear vector
ODEs; the filters are then exact (``E[W1(t) | W2] = 0``). For general
``xi`` a least-squares Monte-Carlo recursion is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import GammaSingularError, RegressionError
from .forward import TransformedProblem
from .gamma import GammaSolution, _node_stage
from .ode import BACKWARD, RCOND_FLOOR, integrate_matrix_ode, safe_inverse
from .paths import MatrixPath
from .problem import AffineInTerminalBM, Deterministic, SampledFunctional

__all__ = [
    "DriftKernels",
    "AffineAdjointSolution",
    "SampledAdjointSolution",
    "RegressionBasis",
    "assemble_drift_kernels",
    "kernels_at",
    "solve_affine_terminal",
    "solve_lsmc_terminal",
    "compare_adjoint_solutions",
]

COND_LIMIT = 1e10

PROCESSES = ("phi", "beta1", "beta2", "phi_hat", "beta1_hat", "beta2_hat")


def kernels_at(tp: TransformedProblem, gamma: np.ndarray, k: int, s: float):
    """``(K, L1, L2)`` for a given ``Gamma`` value at stage ``(k, s)``."""
    n = tp.n
    s1, s2, s3 = tp.S1.at(k, s), tp.S2.at(k, s), tp.S3.at(k, s)
    c2 = tp.C2.at(k, s)
    bg = tp.B.at(k, s) + gamma @ s3.T
    cg = c2 + gamma @ s2.T
    ngi, _ = safe_inverse(np.eye(n) + gamma @ tp.N2.at(k, s), RCOND_FLOOR, GammaSingularError, "N_Gamma", 1.0)
    r_inv, _ = safe_inverse(tp.R.at(k, s), what="R")
    K = bg @ r_inv @ s3 + cg @ ngi @ gamma @ s2
    L1 = gamma @ s1.T
    L2 = cg @ ngi - c2
    return K, L1, L2


@dataclass(frozen=True)
class DriftKernels:
    """Filter coefficients of the adjoint drift, sampled at the nodes.

    ``at(k, s)`` re-evaluates them from the interpolated ``Gamma`` so that
    Runge-Kutta stages see smooth kernels.
    """

    K: MatrixPath
    L1: MatrixPath
    L2: MatrixPath
    tp: TransformedProblem = field(repr=False)
    gs: GammaSolution = field(repr=False)

    def at(self, k: int, s: float):
        return kernels_at(self.tp, self.gs.gamma.at(k, s), k, s)

    def node(self, k: int):
        return self.K[k], self.L1[k], self.L2[k]


def assemble_drift_kernels(gs: GammaSolution, tp: TransformedProblem) -> DriftKernels:
    if gs.grid != tp.grid:
        raise ValueError("Gamma and problem live on different grids")
    grid = tp.grid
    vals = [kernels_at(tp, gs.gamma[k], *_node_stage(grid, k)) for k in range(grid.steps + 1)]
    K, L1, L2 = (MatrixPath(grid, np.stack([v[i] for v in vals])) for i in range(3))
    return DriftKernels(K, L1, L2, tp, gs)


# affine terminal data --------------------------------------------------------


@dataclass(frozen=True)
class AffineAdjointSolution:
    """``phi(t) = p(t) + q1(t) W1(t) + q2(t) W2(t)`` with deterministic loadings.

    ``beta_i = q_i``, ``phi_hat = p + q2 W2`` and ``beta_i_hat = q_i``.
    """

    p: np.ndarray  # (N+1, n)
    q1: np.ndarray
    q2: np.ndarray
    grid: object
    terminal: AffineInTerminalBM

    @property
    def kind(self) -> str:
        return "affine"

    def on_ensemble(self, ens) -> dict:
        """All six processes on the ensemble, shape ``(M, N+1, n)``.

        Loadings are broadcast views, so memory stays proportional to the
        two ``phi`` arrays.
        """
        if ens.grid != self.grid:
            raise ValueError("ensemble lives on a different grid")
        shape = (ens.paths,) + self.p.shape
        phi_hat = self.p[None] + ens.W2[:, :, None] * self.q2[None]
        phi = phi_hat + ens.W1[:, :, None] * self.q1[None]
        b1 = np.broadcast_to(self.q1, shape)
        b2 = np.broadcast_to(self.q2, shape)
        return dict(phi=phi, beta1=b1, beta2=b2, phi_hat=phi_hat, beta1_hat=b1, beta2_hat=b2)

    def mean(self, name: str) -> np.ndarray:
        """Exact expectation of a process, shape ``(N+1, n)``."""
        return {"phi": self.p, "phi_hat": self.p, "beta1": self.q1, "beta1_hat": self.q1,
                "beta2": self.q2, "beta2_hat": self.q2}[name]


def solve_affine_terminal(
    tp: TransformedProblem,
    gs: GammaSolution,
    kernels: DriftKernels,
    terminal,
    substeps: int = 4,
) -> AffineAdjointSolution:
    """Undetermined-coefficient solution for affine ``xi``.

    Solves backward, as one ``n x 3`` system::

        q1' = A q1
        q2' = (A - K) q2
        p'  = (A - K) p + (C1 + L1) q1 + (C2 + L2) q2
    """
    if isinstance(terminal, Deterministic):
        terminal = terminal.as_affine()
    if not isinstance(terminal, AffineInTerminalBM):
        raise TypeError(f"affine solver needs an affine terminal condition, got {type(terminal).__name__}")
    if terminal.n != tp.n:
        raise ValueError("terminal dimension does not match the problem")

    def rhs(k, s, M):
        a = tp.A.at(k, s)
        K, L1, L2 = kernels.at(k, s)
        p, q1, q2 = M[:, 0], M[:, 1], M[:, 2]
        ak = a - K
        dp = ak @ p + (tp.C1.at(k, s) + L1) @ q1 + (tp.C2.at(k, s) + L2) @ q2
        return np.stack([dp, a @ q1, ak @ q2], axis=1)

    boundary = np.stack([terminal.c, terminal.b1, terminal.b2], axis=1)
    sol = integrate_matrix_ode(rhs, boundary, BACKWARD, tp.grid, substeps, name="adjoint")
    v = sol.values
    return AffineAdjointSolution(v[:, :, 0].copy(), v[:, :, 1].copy(), v[:, :, 2].copy(), tp.grid, terminal)


# least-squares Monte Carlo --------------------------------------------------


@dataclass(frozen=True)
class RegressionBasis:
    """Total-degree polynomial basis in the current Brownian values.

    Full-information expectations regress on monomials in ``(W1_k, W2_k)``;
    filters regress on monomials in ``W2_k`` only.
    """

    degree: int = 2

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError("basis degree must be a non-negative integer")

    def full(self, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
        cols = [w1**i * w2**j for i in range(self.degree + 1) for j in range(self.degree + 1 - i)]
        return np.stack(cols, axis=1)

    def filtered(self, w2: np.ndarray) -> np.ndarray:
        return np.stack([w2**j for j in range(self.degree + 1)], axis=1)

    def describe(self) -> str:
        return f"polynomial total degree {self.degree}; full: (W1, W2), filter: W2"


class _Projector:
    """Least-squares projection onto the span of standardized features."""

    def __init__(self, X: np.ndarray, what: str):
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        keep = std > 1e-12 * max(1.0, float(np.abs(mean).max(initial=0.0)))
        Z = (X[:, keep] - mean[keep]) / std[keep]
        Z = np.concatenate([np.ones((X.shape[0], 1)), Z], axis=1)
        q, r = np.linalg.qr(Z)
        cond = np.linalg.cond(r)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise RegressionError(
                f"{what} regression is rank deficient (condition {cond:.2e}); "
                "use a smaller basis or more paths"
            )
        self.q = q

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return self.q @ (self.q.T @ y)


@dataclass(frozen=True)
class SampledAdjointSolution:
    phi: np.ndarray  # (M, N+1, n)
    beta1: np.ndarray
    beta2: np.ndarray
    phi_hat: np.ndarray
    beta1_hat: np.ndarray
    beta2_hat: np.ndarray
    basis: RegressionBasis
    grid: object
    ensemble_id: str

    @property
    def kind(self) -> str:
        return "sampled"

    @property
    def paths(self) -> int:
        return self.phi.shape[0]

    def on_ensemble(self, ens) -> dict:
        if ens.fingerprint != self.ensemble_id:
            raise ValueError("sampled adjoint solution was built on a different ensemble")
        return {name: getattr(self, name) for name in PROCESSES}


def solve_lsmc_terminal(
    tp: TransformedProblem,
    gs: GammaSolution,
    kernels: DriftKernels,
    terminal,
    ensemble,
    basis: Optional[RegressionBasis] = None,
) -> SampledAdjointSolution:
    """Backward Euler recursion with regression-based conditional expectations.

    At step ``k`` (going backward):

    1. predictor ``phi_k = E[y | F_k]`` with ``y = phi_{k+1} - dt f_{k+1}``
       and the drift ``f`` evaluated at the step ``k+1`` state;
    2. ``beta_i = E[(y - E[y | F_k]) dW_i | F_k] / dt`` and the filters
       ``beta_i_hat`` from the same targets regressed on ``W2`` features;
    3. one corrector pass ``phi_k = E[phi_{k+1} | F_k] - dt f_k`` using the
       predicted ``phi_k`` and ``phi_hat_k``.

    ``phi_N = xi`` exactly; ``phi_hat_N`` is its ``W2``-regression. The
    loadings at ``T`` repeat those of the last step.

    Raises
    ------
    RegressionError
        If a regression design is numerically rank deficient.
    """
    basis = RegressionBasis() if basis is None else basis
    if ensemble.grid != tp.grid:
        raise ValueError("ensemble lives on a different grid")
    grid = tp.grid
    N, dt, n = grid.steps, grid.dt, tp.n
    M = ensemble.paths
    xi = terminal.sample(ensemble.W1, ensemble.W2)
    if xi.shape != (M, n):
        raise ValueError(f"terminal sample has shape {xi.shape}, expected {(M, n)}")

    out = {name: np.empty((M, N + 1, n)) for name in PROCESSES}
    out["phi"][:, N] = xi
    proj_g = _Projector(basis.filtered(ensemble.W2[:, N]), "filter")
    out["phi_hat"][:, N] = proj_g(xi)

    def drift(k, s, phi, phi_hat, b1, b2, b1h, b2h):
        K, L1, L2 = kernels.at(k, s)
        a, c1, c2 = tp.A.at(k, s), tp.C1.at(k, s), tp.C2.at(k, s)
        return phi @ a.T + b1 @ c1.T + b2 @ c2.T - phi_hat @ K.T + b1h @ L1.T + b2h @ L2.T

    def drift_hat(k, s, phi_hat, b1h, b2h):
        return drift(k, s, phi_hat, phi_hat, b1h, b2h, b1h, b2h)

    def loadings(proj_f, proj_g, resid, k):
        z = np.concatenate([resid * ensemble.dW1[:, k, None], resid * ensemble.dW2[:, k, None]], axis=1) / dt
        zf, zg = proj_f(z), proj_g(z)
        return zf[:, :n], zf[:, n:], zg[:, :n], zg[:, n:]

    # loadings at T are unknown to the scheme; start from a plain estimate
    # over the last step, which is overwritten by the refined one at the end
    proj_f = _Projector(basis.full(ensemble.W1[:, N - 1], ensemble.W2[:, N - 1]), "full-information")
    proj_g = _Projector(basis.filtered(ensemble.W2[:, N - 1]), "filter")
    start = loadings(proj_f, proj_g, xi - proj_f(xi), N - 1)
    for name, v in zip(("beta1", "beta2", "beta1_hat", "beta2_hat"), start):
        out[name][:, N] = v

    for k in range(N - 1, -1, -1):
        if k < N - 1:
            proj_f = _Projector(basis.full(ensemble.W1[:, k], ensemble.W2[:, k]), "full-information")
            proj_g = _Projector(basis.filtered(ensemble.W2[:, k]), "filter")
        nxt = out["phi"][:, k + 1]
        nxt_hat = out["phi_hat"][:, k + 1]
        state_next = [out[name][:, k + 1] for name in ("beta1", "beta2", "beta1_hat", "beta2_hat")]

        # predictor: drift at step k+1 (cell k, right end)
        f_next = drift(k, dt, nxt, nxt_hat, *state_next)
        target = nxt - dt * f_next
        phi_pred = proj_f(target)
        phi_hat_pred = proj_g(target)

        # martingale-increment regressions on the centred predictor target:
        # centring removes the O(1/sqrt(dt)) noise and subtracting the drift
        # removes the one-step time shift of the loadings
        b1, b2, b1h, b2h = loadings(proj_f, proj_g, target - phi_pred, k)

        # corrector: drift at step k with the predicted state
        e_f = proj_f(nxt)
        e_g = proj_g(nxt)
        phi_k = e_f - dt * drift(k, 0.0, phi_pred, phi_hat_pred, b1, b2, b1h, b2h)
        phi_hat_k = e_g - dt * drift_hat(k, 0.0, phi_hat_pred, b1h, b2h)

        out["phi"][:, k] = phi_k
        out["phi_hat"][:, k] = phi_hat_k
        out["beta1"][:, k], out["beta2"][:, k] = b1, b2
        out["beta1_hat"][:, k], out["beta2_hat"][:, k] = b1h, b2h
        if not np.all(np.isfinite(phi_k)):
            raise RegressionError(f"non-finite adjoint state at step {k}")

    for name in ("beta1", "beta2", "beta1_hat", "beta2_hat"):
        out[name][:, N] = out[name][:, N - 1]
    return SampledAdjointSolution(basis=basis, grid=grid, ensemble_id=ensemble.fingerprint, **out)


def compare_adjoint_solutions(
    tp: TransformedProblem,
    gs: GammaSolution,
    kernels: DriftKernels,
    affine: AffineAdjointSolution,
    ensemble,
    nodes=None,
    batches: int = 20,
    basis: Optional[RegressionBasis] = None,
):
    """Cross-check the LSMC solver against the exact affine solution.

    The LSMC recursion is run on the whole ensemble and, independently, on
    ``batches`` disjoint sub-ensembles. The spread of the batch estimates
    gives the standard error of the full-ensemble sample means, including
    the regression noise accumulated along the backward recursion.

    Returns
    -------
    rows : list of tuple
        ``(node, process, lsmc_mean, exact_mean, standard_error)``.
    sampled : SampledAdjointSolution
        The full-ensemble solution.
    """
    grid = affine.grid
    nodes = list(range(0, grid.steps, max(1, grid.steps // 4))) if nodes is None else list(nodes)
    names = ("phi", "phi_hat", "beta1", "beta2", "beta1_hat", "beta2_hat")
    terminal = affine.terminal
    full = solve_lsmc_terminal(tp, gs, kernels, terminal, ensemble, basis)
    M = ensemble.paths
    if batches < 2 or M // batches < 100:
        raise ValueError("need at least two batches of 100 paths")
    size = M // batches
    batch_means = {name: [] for name in names}
    for j in range(batches):
        sub = ensemble.subset(slice(j * size, (j + 1) * size))
        sol = solve_lsmc_terminal(tp, gs, kernels, terminal, sub, basis)
        for name in names:
            batch_means[name].append(getattr(sol, name)[:, nodes].mean(axis=0))
    rows = []
    for name in names:
        bm = np.array(batch_means[name])  # (batches, len(nodes), n)
        se = bm.std(axis=0, ddof=1) / np.sqrt(batches)
        est = getattr(full, name)[:, nodes].mean(axis=0)
        for i, k in enumerate(nodes):
            rows.append((k, name, est[i], affine.mean(name)[k], se[i]))
    return rows, full
