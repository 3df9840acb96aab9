"""Closed-loop simulation of the filtered Hamiltonian system.

The adjoint state ``X`` and its filter ``X_hat`` start from zero and follow::

    dX     = (-A^T X + At X_hat + b) dt
             + (-C1^T X + C1t X_hat + c1) dW1
             + (-C2^T X + C2t X_hat + c2) dW2

    dX_hat = (Ah X_hat + b_hat) dt + (C2h X_hat + c2_hat) dW2

with ``Ah = At - A^T`` and ``C2h = C2t - C2^T``. The deterministic
coefficients are::

    At  = S2^T N_G^{-1} Gamma C_G^T + S3^T R^{-1} B_G^T
    C1t = -S1 Gamma
    C2t = N2 N_G^{-1} Gamma C_G^T - S2 Gamma

and the forcing terms are affine in the adjoint processes. The optimal
state and control are then read off algebraically::

    Y  = -Gamma X_hat + phi
    Z1 = beta1
    Z2 = N_G^{-1} (Gamma C_G^T X_hat - Gamma S2 phi_hat + beta2_hat) + beta2 - beta2_hat
    u  = R^{-1} (B_G^T X_hat - S3 phi_hat)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .errors import BlowUpError
from .forward import TransformedProblem
from .gamma import GammaSolution
from .ode import safe_inverse
from .paths import TimeGrid
from .problem import problem_hash

__all__ = [
    "BrownianEnsemble",
    "ClosedLoopCoefficients",
    "StatePathEnsemble",
    "assemble_closed_loop",
    "simulate_xhat",
    "simulate_x",
    "reconstruct_optimal",
    "array_hash",
]

BLOCK = 4096


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class BrownianEnsemble:
    """Pre-generated Brownian increments shared by every consumer.

    Paths are generated in fixed blocks of 4096, each block from its own
    child of ``SeedSequence(seed)`` through a counter-based Philox stream,
    so the increments of a path depend only on the seed and its index.
    """

    grid: TimeGrid
    dW1: np.ndarray  # (M, N)
    dW2: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        if self.dW1.shape != self.dW2.shape or self.dW1.shape[1] != self.grid.steps:
            raise ValueError("increment arrays must both have shape (M, N)")

    @classmethod
    def generate(cls, grid: TimeGrid, paths: int, seed: int) -> "BrownianEnsemble":
        if int(paths) != paths or paths < 1:
            raise ValueError(f"path count must be a positive integer, got {paths!r}")
        paths = int(paths)
        n_blocks = -(-paths // BLOCK)
        children = np.random.SeedSequence(seed).spawn(n_blocks)
        out = np.empty((paths, 2, grid.steps))
        for j, child in enumerate(children):
            lo, hi = j * BLOCK, min((j + 1) * BLOCK, paths)
            rng = np.random.Generator(np.random.Philox(child))
            out[lo:hi] = rng.standard_normal((hi - lo, 2, grid.steps))
        out *= np.sqrt(grid.dt)
        return cls(grid, out[:, 0].copy(), out[:, 1].copy(), seed)

    @property
    def paths(self) -> int:
        return self.dW1.shape[0]

    @cached_property
    def W1(self) -> np.ndarray:
        return _cumulate(self.dW1)

    @cached_property
    def W2(self) -> np.ndarray:
        return _cumulate(self.dW2)

    @cached_property
    def fingerprint(self) -> str:
        return array_hash(np.array([self.grid.horizon, self.grid.steps]), self.dW1, self.dW2)

    def subset(self, index) -> "BrownianEnsemble":
        """Ensemble restricted to the paths selected by ``index``."""
        return BrownianEnsemble(self.grid, self.dW1[index], self.dW2[index], self.seed)

    def coarsen(self, factor: int) -> "BrownianEnsemble":
        """Same Brownian paths on a grid ``factor`` times coarser."""
        if self.grid.steps % factor:
            raise ValueError("factor must divide the number of steps")
        grid = TimeGrid(self.grid.horizon, self.grid.steps // factor)
        shape = (self.paths, grid.steps, factor)
        return BrownianEnsemble(grid, self.dW1.reshape(shape).sum(2), self.dW2.reshape(shape).sum(2), self.seed)


def _cumulate(dw):
    w = np.zeros((dw.shape[0], dw.shape[1] + 1))
    np.cumsum(dw, axis=1, out=w[:, 1:])
    return w


@dataclass(frozen=True, eq=False)
class ClosedLoopCoefficients:
    """Coefficients of the ``X`` and ``X_hat`` equations.

    Deterministic parts are node arrays of shape ``(N+1, n, n)``; the
    forcing terms come from ``forcing(k)``, which returns a dict with keys
    ``b, c1, c2, b_hat, c2_hat`` (arrays of shape ``(M, n)`` or ``(n,)``).
    """

    grid: TimeGrid
    A_tilde: np.ndarray
    C1_tilde: np.ndarray
    C2_tilde: np.ndarray
    A_hat: np.ndarray
    C2_hat: np.ndarray
    minus_AT: np.ndarray
    minus_C1T: np.ndarray
    minus_C2T: np.ndarray
    forcing: Callable[[int], dict] = field(repr=False)
    tp: Optional[TransformedProblem] = field(default=None, repr=False)
    gs: Optional[GammaSolution] = field(default=None, repr=False)
    adjoint: Optional[dict] = field(default=None, repr=False)
    adjoint_hash: str = ""

    @classmethod
    def from_arrays(cls, grid: TimeGrid, n: int, **kw) -> "ClosedLoopCoefficients":
        """Build from constant matrices/vectors (missing entries are zero).

        Matrix keys: ``A_tilde, C1_tilde, C2_tilde, A, C1, C2`` (the last
        three enter as ``-A^T`` etc.). Vector keys: ``b, c1, c2, b_hat,
        c2_hat``.
        """
        def mat(key):
            m = np.atleast_2d(np.asarray(kw.get(key, np.zeros((n, n))), dtype=float))
            return np.broadcast_to(m, (grid.steps + 1, n, n)).copy()

        At, C1t, C2t = mat("A_tilde"), mat("C1_tilde"), mat("C2_tilde")
        A, C1, C2 = mat("A"), mat("C1"), mat("C2")
        vecs = {key: np.atleast_1d(np.asarray(kw.get(key, np.zeros(n)), dtype=float))
                for key in ("b", "c1", "c2", "b_hat", "c2_hat")}
        T = lambda m: np.swapaxes(m, 1, 2)
        return cls(grid, At, C1t, C2t, At - T(A), C2t - T(C2), -T(A), -T(C1), -T(C2),
                   lambda k: vecs)


def assemble_closed_loop(gs: GammaSolution, adjoint, tp: TransformedProblem, ensemble) -> ClosedLoopCoefficients:
    """Closed-loop coefficients for a solved ``Gamma`` and adjoint.

    ``adjoint`` is an :class:`~bslq.adjoint.AffineAdjointSolution` or a
    :class:`~bslq.adjoint.SampledAdjointSolution`; its processes are laid out
    on ``ensemble`` once and the forcing terms are formed per step.
    """
    if gs.grid != tp.grid or adjoint.grid != tp.grid or ensemble.grid != tp.grid:
        raise ValueError("Gamma, adjoint, problem and ensemble must share one grid")
    grid = tp.grid
    n = tp.n
    eye = np.eye(n)
    nodes = range(grid.steps + 1)
    G = gs.gamma.values
    ngi = gs.n_gamma_inv.values
    bg, cg = gs.b_gamma.values, gs.c_gamma.values
    S1, S2, S3 = tp.S1.values, tp.S2.values, tp.S3.values
    N1, N2 = tp.N1.values, tp.N2.values
    r_inv = np.stack([safe_inverse(tp.R.values[k], what="R")[0] for k in nodes])
    T = lambda m: np.swapaxes(m, -1, -2)

    At = T(S2) @ ngi @ G @ T(cg) + T(S3) @ r_inv @ T(bg)
    C1t = -S1 @ G
    C2t = N2 @ ngi @ G @ T(cg) - S2 @ G
    A, C1, C2 = tp.A.values, tp.C1.values, tp.C2.values

    Mb = T(S2) @ ngi @ G @ S2 + T(S3) @ r_inv @ S3
    S2T_excess = T(S2) @ (ngi - eye)
    N2_ngi = N2 @ ngi
    c2_phi_hat = N2_ngi @ G @ S2
    c2h_phi_hat = (eye - N2_ngi @ G) @ S2

    data = adjoint.on_ensemble(ensemble)

    def mv(mat, x):
        return x @ mat.T

    def forcing(k):
        phi, phih = data["phi"][:, k], data["phi_hat"][:, k]
        b1, b2 = data["beta1"][:, k], data["beta2"][:, k]
        b1h, b2h = data["beta1_hat"][:, k], data["beta2_hat"][:, k]
        common = -mv(Mb[k], phih)
        return dict(
            b=common + mv(T(S1[k]), b1) + mv(T(S2[k]), b2) + mv(S2T_excess[k], b2h),
            c1=mv(S1[k], phi) + mv(N1[k], b1),
            c2=mv(S2[k], phi) - mv(c2_phi_hat[k], phih) + mv(N2[k], b2) + mv(N2[k] @ (ngi[k] - eye), b2h),
            b_hat=common + mv(T(S1[k]), b1h) + mv(T(S2[k]) @ ngi[k], b2h),
            c2_hat=mv(c2h_phi_hat[k], phih) + mv(N2_ngi[k], b2h),
        )

    return ClosedLoopCoefficients(
        grid, At, C1t, C2t, At - T(A), C2t - T(C2), -T(A), -T(C1), -T(C2),
        forcing, tp, gs, data, array_hash(data["phi"], data["phi_hat"]),
    )


def _check(x, k, what):
    bad = ~np.all(np.isfinite(x), axis=1)
    if bad.any():
        path = int(np.argmax(bad))
        raise BlowUpError(f"{what}: non-finite state on path {path} at step {k}")


def simulate_xhat(clc: ClosedLoopCoefficients, ensemble) -> np.ndarray:
    """Euler-Maruyama for ``X_hat`` driven by ``W2`` only; shape ``(M, N+1, n)``."""
    if ensemble.grid != clc.grid:
        raise ValueError("ensemble lives on a different grid")
    N, dt = clc.grid.steps, clc.grid.dt
    n = clc.A_hat.shape[1]
    xh = np.zeros((ensemble.paths, N + 1, n))
    for k in range(N):
        f = clc.forcing(k)
        x = xh[:, k]
        drift = x @ clc.A_hat[k].T + f["b_hat"]
        diff = x @ clc.C2_hat[k].T + f["c2_hat"]
        xh[:, k + 1] = x + drift * dt + diff * ensemble.dW2[:, k, None]
        _check(xh[:, k + 1], k + 1, "X_hat")
    return xh


def simulate_x(clc: ClosedLoopCoefficients, ensemble, xhat: np.ndarray) -> np.ndarray:
    """Euler-Maruyama for ``X`` driven by both Brownian motions."""
    if ensemble.grid != clc.grid:
        raise ValueError("ensemble lives on a different grid")
    if xhat.shape[:2] != (ensemble.paths, clc.grid.steps + 1):
        raise ValueError("X_hat paths do not match the ensemble")
    N, dt = clc.grid.steps, clc.grid.dt
    X = np.zeros_like(xhat)
    for k in range(N):
        f = clc.forcing(k)
        x, xh = X[:, k], xhat[:, k]
        drift = x @ clc.minus_AT[k].T + xh @ clc.A_tilde[k].T + f["b"]
        d1 = x @ clc.minus_C1T[k].T + xh @ clc.C1_tilde[k].T + f["c1"]
        d2 = x @ clc.minus_C2T[k].T + xh @ clc.C2_tilde[k].T + f["c2"]
        X[:, k + 1] = x + drift * dt + d1 * ensemble.dW1[:, k, None] + d2 * ensemble.dW2[:, k, None]
        _check(X[:, k + 1], k + 1, "X")
    return X


@dataclass(frozen=True, eq=False)
class StatePathEnsemble:
    """Monte-Carlo paths of the optimal pair and its adjoint.

    All process arrays have shape ``(M, N+1, dim)``.
    """

    grid: TimeGrid
    W1: np.ndarray
    W2: np.ndarray
    X: Optional[np.ndarray]
    X_hat: np.ndarray
    Y: np.ndarray
    Y_hat: np.ndarray
    Z1: np.ndarray
    Z2: np.ndarray
    u: np.ndarray
    xi: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def paths(self) -> int:
        return self.Y.shape[0]


def reconstruct_optimal(
    gs: GammaSolution,
    adjoint,
    xhat: np.ndarray,
    clc: ClosedLoopCoefficients,
    ensemble,
    X: Optional[np.ndarray] = None,
) -> StatePathEnsemble:
    """Optimal ``(Y, Z1, Z2, u)`` from ``X_hat`` and the adjoint processes."""
    tp = clc.tp
    if tp is None or clc.adjoint is None:
        raise ValueError("closed-loop coefficients were not assembled from a solved problem")
    if gs.grid != clc.grid or adjoint.grid != clc.grid:
        raise ValueError("grid mismatch")
    data = clc.adjoint
    T = lambda m: np.swapaxes(m, -1, -2)
    G = gs.gamma.values
    ngi = gs.n_gamma_inv.values
    r_inv = np.stack([safe_inverse(r, what="R")[0] for r in tp.R.values])

    def apply(mats, x):  # node-wise matrix times (M, N+1, n)
        return np.einsum("kij,mkj->mki", mats, x)

    phi, phih = data["phi"], data["phi_hat"]
    b2, b2h = data["beta2"], data["beta2_hat"]
    Y = -apply(G, xhat) + phi
    Y_hat = -apply(G, xhat) + phih
    Z1 = np.array(data["beta1"], copy=True)
    Z2 = apply(ngi, apply(G @ T(gs.c_gamma.values), xhat) - apply(G @ tp.S2.values, phih) + b2h) + b2 - b2h
    u = apply(r_inv, apply(T(gs.b_gamma.values), xhat) - apply(tp.S3.values, phih))
    xi = tp.base.terminal.sample(ensemble.W1, ensemble.W2) if tp.base.terminal is not None else phi[:, -1]
    provenance = dict(
        problem_hash=problem_hash(tp.base),
        gamma_hash=array_hash(G),
        adjoint_hash=clc.adjoint_hash,
        ensemble=ensemble.fingerprint,
        seed=ensemble.seed,
        paths=ensemble.paths,
        steps=clc.grid.steps,
    )
    return StatePathEnsemble(clc.grid, ensemble.W1, ensemble.W2, X, xhat, Y, Y_hat, Z1, Z2, u, xi, provenance)
