"""Cost simplification and the lambda-family of forward Lyapunov/Riccati equations.

The transform kernel ``Phi`` solves ``Phi' + Phi A + A^T Phi + Q = 0`` forward
from ``Phi(0) = -G``. Adding ``d<Phi Y, Y>`` to the cost removes the ``G`` and
``Q`` terms at the price of shifting the remaining weights::

    N1 -> N1 + Phi,  N2 -> N2 + Phi,
    S1 -> S1 + C1^T Phi,  S2 -> S2 + C2^T Phi,  S3 -> S3 + B^T Phi,

and the original cost equals the transformed one minus ``E<Phi(T) xi, xi>``.

For a terminal penalty ``lam`` the associated forward problem has a
Lyapunov solution ``P1`` and a Riccati solution ``P2``, both ending at
``lam I``. The Riccati equation requires the blocks ``N1 + P1``, ``N2 + P2``
and ``R`` to stay positive definite; the smallest eigenvalue over the three
blocks is tracked as the block margin and an undersized ``lam`` is detected
when the margin falls below a floor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import BlowUpError, LambdaTooSmallError
from .ode import BACKWARD, FORWARD, integrate_matrix_ode
from .paths import MatrixPath
from .problem import LQProblem, TerminalCondition

__all__ = [
    "TransformedProblem",
    "LambdaFamilyEntry",
    "MonotonicityReport",
    "solve_phi",
    "apply_cost_transform",
    "solve_lyapunov_lambda",
    "solve_riccati_lambda",
    "check_lambda_monotonicity",
    "sweep_lambda",
]

MARGIN_FLOOR = 1e-8
MONOTONE_TOL = -1e-8


def solve_phi(p: LQProblem, substeps: int = 4) -> MatrixPath:
    """Transform kernel ``Phi`` on the problem grid (symmetric)."""
    A, Q = p.A, p.Q

    def rhs(k, s, M):
        a = A.at(k, s)
        return -(M @ a + a.T @ M + Q.at(k, s))

    return integrate_matrix_ode(rhs, -p.G, FORWARD, p.grid, substeps, symmetric=True, name="Phi")


@dataclass(frozen=True)
class TransformedProblem:
    """Weights of the simplified cost (``G = 0``, ``Q = 0``).

    ``A``, ``B``, ``C1``, ``C2`` and ``R`` are those of ``base``.
    """

    base: LQProblem
    phi: MatrixPath
    N1: MatrixPath
    N2: MatrixPath
    S1: MatrixPath
    S2: MatrixPath
    S3: MatrixPath
    Q: MatrixPath

    A = property(lambda self: self.base.A)
    B = property(lambda self: self.base.B)
    C1 = property(lambda self: self.base.C1)
    C2 = property(lambda self: self.base.C2)
    R = property(lambda self: self.base.R)
    grid = property(lambda self: self.base.grid)
    n = property(lambda self: self.base.n)
    m = property(lambda self: self.base.m)

    @property
    def G(self) -> np.ndarray:
        return np.zeros((self.n, self.n))

    @property
    def terminal(self) -> Optional[TerminalCondition]:
        return self.base.terminal

    def as_problem(self) -> LQProblem:
        """The simplified cost as a standalone :class:`LQProblem`."""
        from .problem import WeightSet

        weights = WeightSet(
            G=self.G, Q=self.Q, S1=self.S1, S2=self.S2, S3=self.S3,
            N1=self.N1, N2=self.N2, R=self.R,
        )
        return LQProblem(self.base.dims, self.grid, self.base.coeffs, weights, self.base.terminal)

    def terminal_correction(self, xi: Optional[TerminalCondition] = None, ensemble=None) -> float:
        """``E<Phi(T) xi, xi>``: exact for affine data, a sample mean otherwise."""
        xi = self.base.terminal if xi is None else xi
        if xi is None:
            raise ValueError("no terminal condition supplied")
        phi_T = self.phi[-1]
        if hasattr(xi, "second_moment"):
            return float(np.sum(phi_T * xi.second_moment(self.grid.horizon)))
        if ensemble is None:
            raise ValueError("a sampled terminal condition needs an ensemble")
        samples = xi.sample(ensemble.W1, ensemble.W2)
        return float(np.mean(np.einsum("pi,ij,pj->p", samples, phi_T, samples)))


def apply_cost_transform(p: LQProblem, substeps: int = 4, phi: Optional[MatrixPath] = None) -> TransformedProblem:
    """Shift the weights by ``Phi`` so that the new cost has ``G = Q = 0``."""
    if phi is None:
        phi = solve_phi(p, substeps)
    return TransformedProblem(
        base=p,
        phi=phi,
        N1=p.N1 + phi,
        N2=p.N2 + phi,
        S1=p.S1 + p.C1.T @ phi,
        S2=p.S2 + p.C2.T @ phi,
        S3=p.S3 + p.B.T @ phi,
        Q=MatrixPath.zeros(p.grid, (p.n, p.n)),
    )


def _check_lambda(lam):
    if not (np.isfinite(lam) and lam > 0):
        raise ValueError(f"lambda must be positive, got {lam!r}")


def solve_lyapunov_lambda(tp, lam: float, substeps: int = 4) -> MatrixPath:
    """``P1' + P1 A + A^T P1 + Q = 0`` backward from ``lam I``.

    ``tp`` may be a :class:`TransformedProblem` (``Q = 0``) or a plain
    :class:`LQProblem`, whose ``Q`` is then kept.
    """
    _check_lambda(lam)
    A, Q = tp.A, tp.Q

    def rhs(k, s, M):
        a = A.at(k, s)
        return -(M @ a + a.T @ M + Q.at(k, s))

    return integrate_matrix_ode(
        rhs, lam * np.eye(tp.n), BACKWARD, tp.grid, substeps, symmetric=True, name="P1"
    )


@dataclass(frozen=True)
class LambdaFamilyEntry:
    lam: float
    P1: MatrixPath
    P2: MatrixPath
    margin: float
    node_margins: np.ndarray

    @property
    def blockPositivityMargin(self) -> float:
        return self.margin


def _block_data(tp, P1, P2_stage, k, s):
    """Blocks ``E_i`` and ``D_i`` of the Riccati quadratic term at one stage."""
    c1, c2, b = tp.C1.at(k, s), tp.C2.at(k, s), tp.B.at(k, s)
    E = (
        c1.T @ P2_stage + tp.S1.at(k, s),
        c2.T @ P2_stage + tp.S2.at(k, s),
        b.T @ P2_stage + tp.S3.at(k, s),
    )
    D = (tp.N1.at(k, s) + P1.at(k, s), tp.N2.at(k, s) + P2_stage, tp.R.at(k, s))
    return E, D


def _block_margin(D) -> float:
    return min(float(np.linalg.eigvalsh(0.5 * (d + d.T))[0]) for d in D)


def solve_riccati_lambda(
    tp,
    lam: float,
    P1: Optional[MatrixPath] = None,
    substeps: int = 4,
    margin_floor: float = MARGIN_FLOOR,
) -> LambdaFamilyEntry:
    """Riccati member of the lambda-family, backward from ``lam I``.

    Solves::

        P2' + P2 A + A^T P2 + Q
            - sum_i E_i^T D_i^{-1} E_i = 0,
        E = (C1^T P2 + S1, C2^T P2 + S2, B^T P2 + S3),
        D = (N1 + P1, N2 + P2, R),

    with the three blocks inverted separately at every Runge-Kutta stage.

    Raises
    ------
    LambdaTooSmallError
        If the block margin drops below ``margin_floor`` at any stage.
    """
    _check_lambda(lam)
    if P1 is None:
        P1 = solve_lyapunov_lambda(tp, lam, substeps)
    if P1.grid != tp.grid:
        raise ValueError("P1 lives on a different grid")
    A, Q = tp.A, tp.Q
    state = {"margin": np.inf}

    def rhs(k, s, M):
        E, D = _block_data(tp, P1, M, k, s)
        margin = _block_margin(D)
        if not margin >= margin_floor:
            t = tp.grid.nodes[k] + s
            raise LambdaTooSmallError(
                f"block margin {margin:.3e} below floor {margin_floor:.0e} at t={t:.6g} "
                f"for lambda={lam:g}; increase lambda"
            )
        state["margin"] = min(state["margin"], margin)
        a = A.at(k, s)
        quad = sum(e.T @ np.linalg.solve(d, e) for e, d in zip(E, D))
        return -(M @ a + a.T @ M + Q.at(k, s)) + quad

    P2 = integrate_matrix_ode(
        rhs, lam * np.eye(tp.n), BACKWARD, tp.grid, substeps, symmetric=True, name="P2"
    )
    node_margins = np.array(
        [_block_margin(_block_data(tp, P1, P2[k], min(k, tp.grid.steps - 1), _node_offset(tp, k))[1])
         for k in range(tp.grid.steps + 1)]
    )
    return LambdaFamilyEntry(float(lam), P1, P2, float(min(state["margin"], node_margins.min())), node_margins)


def _node_offset(tp, k):
    return tp.grid.dt if k == tp.grid.steps else 0.0


@dataclass(frozen=True)
class MonotonicityReport:
    pairs: tuple  # (lam_lo, lam_hi, min_eig_P1_diff, min_eig_P2_diff)
    tolerance: float = MONOTONE_TOL

    @property
    def passed(self) -> bool:
        return all(d1 > self.tolerance and d2 > self.tolerance for _, _, d1, d2 in self.pairs)

    @property
    def worst(self) -> float:
        if not self.pairs:
            return np.inf
        return min(min(d1, d2) for _, _, d1, d2 in self.pairs)


def check_lambda_monotonicity(entries: Sequence[LambdaFamilyEntry]) -> MonotonicityReport:
    """For every pair ``lam_hi > lam_lo`` record the smallest eigenvalue of
    ``P_i(lam_hi) - P_i(lam_lo)`` over all nodes, ``i = 1, 2``."""
    entries = list(entries)
    if len(entries) < 2:
        raise ValueError("monotonicity needs at least two lambda entries")
    grid = entries[0].P1.grid
    if any(e.P1.grid != grid or e.P2.grid != grid for e in entries):
        raise ValueError("lambda entries live on different grids")
    pairs = []
    for i, lo in enumerate(entries):
        for hi in entries[i + 1:]:
            if hi.lam == lo.lam:
                continue
            a, b = (lo, hi) if lo.lam < hi.lam else (hi, lo)
            d1 = float((b.P1 - a.P1).min_eigenvalues().min())
            d2 = float((b.P2 - a.P2).min_eigenvalues().min())
            pairs.append((a.lam, b.lam, d1, d2))
    return MonotonicityReport(tuple(pairs))


def sweep_lambda(
    tp,
    start: float = 1.0,
    factor: float = 2.0,
    count: int = 12,
    substeps: int = 4,
    margin_floor: float = MARGIN_FLOOR,
):
    """Solve the lambda-family for ``start * factor**j``, ``j < count``.

    Values below the admissible range are recorded as failures rather than
    raised. Returns ``(entries, failures)`` where ``failures`` maps each
    rejected lambda to its diagnostic.
    """
    if start <= 0 or factor <= 1 or count < 1:
        raise ValueError("sweep needs start > 0, factor > 1, count >= 1")
    entries, failures = [], {}
    for j in range(int(count)):
        lam = start * factor**j
        try:
            entries.append(solve_riccati_lambda(tp, lam, substeps=substeps, margin_floor=margin_floor))
        except (LambdaTooSmallError, BlowUpError) as exc:
            failures[lam] = str(exc)
    return entries, failures
