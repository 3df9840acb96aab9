"""Exact discrete oracle on a four-branch scenario tree.

Each step draws ``(dW1, dW2)`` from ``{+-sqrt(dt)}^2`` with equal weights.
The discrete backward recursion::

    Z_i,k = E_k[Y_{k+1} dW_i] / dt
    Y_k   = expm(-A_k dt) E_k[Y_{k+1}] - dt (B_k u_k + C1_k Z1_k + C2_k Z2_k)

is affine in the stacked control vector, whose entries are indexed by the
``W2`` history only (one control per node of the observation tree). The cost
is therefore an explicit quadratic ``u^T H u + 2 g^T u + c`` and its minimum
is found by a dense linear solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import DiscreteConvexityError, OracleOverflowError
from .problem import AffineInTerminalBM, Deterministic

__all__ = ["TreeOracleResult", "tree_oracle", "MAX_TREE_SIZE"]

MAX_TREE_SIZE = 2048
PSD_TOL = -1e-10


@dataclass(frozen=True)
class TreeOracleResult:
    steps: int
    value: float
    controls: list  # per level k: array (2**k, m), indexed by the W2 bits
    hessian_margin: float  # smallest eigenvalue of the probability-normalized Hessian
    condition: float

    def control_at(self, k: int, w2_bits: int) -> np.ndarray:
        return self.controls[k][w2_bits]


def _terminal_values(xi, n, w1, w2):
    if isinstance(xi, Deterministic):
        xi = xi.as_affine()
    if not isinstance(xi, AffineInTerminalBM):
        raise TypeError("the tree oracle needs deterministic or affine terminal data")
    if xi.n != n:
        raise ValueError("terminal dimension does not match the problem")
    return xi.c + w1[:, None] * xi.b1 + w2[:, None] * xi.b2


def tree_oracle(p, steps: int, xi=None) -> TreeOracleResult:
    """Optimal value and control of the problem on a ``steps``-level tree.

    Coefficients are sampled at the tree times ``k T / steps``; running costs
    use the left-point rule.

    Raises
    ------
    OracleOverflowError
        If ``n * 4**steps`` exceeds the size limit.
    DiscreteConvexityError
        If the quadratic is not positive semi-definite.
    """
    xi = p.terminal if xi is None else xi
    n, m = p.n, p.m
    if int(steps) != steps or steps < 1:
        raise ValueError("tree needs at least one step")
    if n * 4**steps > MAX_TREE_SIZE:
        raise OracleOverflowError(
            f"tree with n={n}, steps={steps} has {n * 4**steps} state entries (limit {MAX_TREE_SIZE})"
        )
    T = p.grid.horizon
    dt = T / steps
    sq = np.sqrt(dt)
    offsets = [2**k - 1 for k in range(steps)]
    D = m * (2**steps - 1)

    leaves = 4**steps
    idx = np.arange(leaves)
    w1 = np.zeros(leaves)
    w2 = np.zeros(leaves)
    for lev in range(steps):
        branch = (idx // 4 ** (steps - 1 - lev)) % 4
        w1 += np.where(branch // 2 == 0, sq, -sq)
        w2 += np.where(branch % 2 == 0, sq, -sq)
    y0 = _terminal_values(xi, n, w1, w2)  # (nodes, n)
    yU = np.zeros((leaves, n, D))

    sign1 = np.array([sq, sq, -sq, -sq])
    sign2 = np.array([sq, -sq, sq, -sq])
    H = np.zeros((D, D))
    g = np.zeros(D)
    c = 0.0

    for k in range(steps - 1, -1, -1):
        t = k * dt
        coef = {name: getattr(p, name).at_time(t) for name in ("A", "B", "C1", "C2", "Q", "S1", "S2", "S3", "N1", "N2", "R")}
        nodes = 4**k
        ch0 = y0.reshape(nodes, 4, n)
        chU = yU.reshape(nodes, 4, n, D)
        e0, eU = ch0.mean(1), chU.mean(1)
        z1_0 = np.einsum("b,nbi->ni", sign1, ch0) / 4 / dt
        z2_0 = np.einsum("b,nbi->ni", sign2, ch0) / 4 / dt
        z1_U = np.einsum("b,nbid->nid", sign1, chU) / 4 / dt
        z2_U = np.einsum("b,nbid->nid", sign2, chU) / 4 / dt

        # control selector: node i at level k reads the control of its W2 history
        i = np.arange(nodes)
        gidx = np.zeros(nodes, dtype=int)
        for lev in range(k):
            gidx = gidx * 2 + ((i // 4 ** (k - 1 - lev)) % 4) % 2
        U = np.zeros((nodes, m, D))
        cols = (offsets[k] + gidx)[:, None] * m + np.arange(m)[None]
        U[np.arange(nodes)[:, None], np.arange(m)[None], cols] = 1.0

        E = expm(-coef["A"] * dt)
        y0 = e0 @ E.T - dt * (z1_0 @ coef["C1"].T + z2_0 @ coef["C2"].T)
        yU = (
            np.einsum("ij,njd->nid", E, eU)
            - dt * (np.einsum("ij,njd->nid", coef["B"], U)
                    + np.einsum("ij,njd->nid", coef["C1"], z1_U)
                    + np.einsum("ij,njd->nid", coef["C2"], z2_U))
        )

        W = _block_weight(coef, n, m)
        gam0 = np.concatenate([y0, z1_0, z2_0, np.zeros((nodes, m))], axis=1)
        gamU = np.concatenate([yU, z1_U, z2_U, U], axis=1)
        w = dt / nodes
        WU = np.einsum("ij,njd->nid", W, gamU)
        H += w * np.einsum("nie,nid->ed", gamU, WU)
        g += w * np.einsum("nid,ni->d", WU, gam0)
        c += w * float(np.einsum("ni,ij,nj->", gam0, W, gam0))

    G = p.G
    H += yU[0].T @ G @ yU[0]
    g += yU[0].T @ G @ y0[0]
    c += float(y0[0] @ G @ y0[0])
    H = 0.5 * (H + H.T)

    # normalize by the probability mass of each control so the margin does
    # not shrink with the tree size
    level = np.repeat(np.concatenate([np.full(2**k, k) for k in range(steps)]), m)
    scale = 1.0 / np.sqrt(dt * 0.5**level)
    Hn = H * scale[:, None] * scale[None, :]
    eig = np.linalg.eigvalsh(Hn)
    margin = float(eig[0])
    if margin < PSD_TOL * max(1.0, abs(eig[-1])):
        raise DiscreteConvexityError(
            f"tree Hessian is not positive semi-definite (normalized margin {margin:.3e}); "
            "the tree may be too coarse or the cost is not uniformly convex"
        )
    if margin > 0:
        u = -np.linalg.solve(H, g)
        cond = float(eig[-1] / margin)
    else:
        u = -np.linalg.lstsq(H, g, rcond=None)[0]
        cond = np.inf
    value = c + float(g @ u)
    controls = [u[offsets[k] * m:(offsets[k] + 2**k) * m].reshape(2**k, m) for k in range(steps)]
    return TreeOracleResult(int(steps), value, controls, margin, cond)


def _block_weight(coef, n, m):
    """Weight of ``(Y, Z1, Z2, u)`` in the running cost."""
    W = np.zeros((3 * n + m, 3 * n + m))
    y, z1, z2, u = slice(0, n), slice(n, 2 * n), slice(2 * n, 3 * n), slice(3 * n, 3 * n + m)
    W[y, y] = coef["Q"]
    W[z1, y], W[y, z1] = coef["S1"], coef["S1"].T
    W[z2, y], W[y, z2] = coef["S2"], coef["S2"].T
    W[u, y], W[y, u] = coef["S3"], coef["S3"].T
    W[z1, z1] = coef["N1"]
    W[z2, z2] = coef["N2"]
    W[u, u] = coef["R"]
    return W
