"""Cost evaluation and optimality checks.

Everything here works on the cost as written: no definiteness of the weights
is assumed. Quadrature is the trapezoid rule on the problem grid throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import VerificationFailed
from .ode import BACKWARD, integrate_matrix_ode, safe_inverse
from .paths import MatrixPath, TimeGrid
from .problem import AffineInTerminalBM, Deterministic

__all__ = [
    "CostBreakdown",
    "PolynomialControl",
    "ConvexityReport",
    "PerturbationReport",
    "ValueReport",
    "cost_of_deterministic_control",
    "random_polynomial_probes",
    "convexity_probe",
    "ensemble_cost",
    "stationarity_residual",
    "perturbation_expansion_check",
    "inject_control",
    "value_formula",
]

TERMS = ("G", "Q", "S1", "S2", "S3", "N1", "N2", "R")


@dataclass(frozen=True)
class CostBreakdown:
    """Cost split by weight; ``se`` holds Monte-Carlo standard errors."""

    terms: dict
    se: Optional[dict] = None
    total_se: float = 0.0

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))

    def __getitem__(self, key):
        return self.terms[key]


def _trapz(values: np.ndarray, dt: float, axis: int = -1) -> np.ndarray:
    v = np.moveaxis(values, axis, -1)
    return dt * (v.sum(axis=-1) - 0.5 * (v[..., 0] + v[..., -1]))


# deterministic controls ------------------------------------------------------


class PolynomialControl:
    """``v(t) = sum_j coeffs[j] P_j(2t/T - 1)`` with Legendre polynomials ``P_j``."""

    def __init__(self, coeffs, horizon: float):
        self.coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))  # (deg+1, m)
        self.horizon = float(horizon)

    @property
    def m(self) -> int:
        return self.coeffs.shape[1]

    def __call__(self, t):
        x = 2.0 * np.asarray(t, dtype=float) / self.horizon - 1.0
        return np.polynomial.legendre.legval(x, self.coeffs).T  # (..., m)


def random_polynomial_probes(m: int, horizon: float, count: int = 100, degree: int = 4, seed: int = 0):
    """Seeded random polynomial controls with standard normal Legendre coefficients."""
    rng = np.random.default_rng(seed)
    return [PolynomialControl(rng.standard_normal((degree + 1, m)), horizon) for _ in range(count)]


def _as_callable(v, grid: TimeGrid, m: int) -> Callable:
    if callable(v):
        return v
    if isinstance(v, MatrixPath):
        return lambda t: v.at_time(float(t)).reshape(m)
    arr = np.asarray(v, dtype=float)
    if arr.ndim <= 1:
        const = np.broadcast_to(arr, (m,)).copy()
        return lambda t: const
    if arr.shape[0] == grid.steps + 1:
        path = MatrixPath(grid, arr.reshape(grid.steps + 1, m, 1))
        return lambda t: path.at_time(float(t)).reshape(m)
    raise ValueError(f"cannot interpret control of shape {arr.shape}")


def _deterministic_states(p, controls: Sequence[Callable], xi: np.ndarray, substeps: int = 4):
    """Solve ``Y' = A Y + B v`` backward from ``xi`` for several controls at once.

    Returns ``(Y, V)`` of shapes ``(N+1, n, P)`` and ``(N+1, m, P)``.
    """
    grid = p.grid
    nodes = grid.nodes

    if controls and all(isinstance(v, PolynomialControl) for v in controls) and \
            len({v.coeffs.shape for v in controls}) == 1:
        # one Legendre evaluation for the whole batch
        stacked = PolynomialControl(np.concatenate([v.coeffs for v in controls], axis=1), controls[0].horizon)
        P = len(controls)

        def vmat(t):
            return np.asarray(stacked(t)).reshape(P, p.m).T
    else:
        def vmat(t):
            return np.stack([np.asarray(v(t), dtype=float).reshape(p.m) for v in controls], axis=1)

    def rhs(k, s, Y):
        return p.A.at(k, s) @ Y + p.B.at(k, s) @ vmat(nodes[k] + s)

    boundary = np.repeat(np.asarray(xi, dtype=float).reshape(p.n, 1), len(controls), axis=1)
    Y = integrate_matrix_ode(rhs, boundary, BACKWARD, grid, substeps, name="Y").values
    V = np.stack([vmat(t) for t in nodes])
    return Y, V


def _node_weights(p, name):
    return getattr(p, name).values


def _deterministic_breakdown(p, Y, V):
    """Per-control cost terms for deterministic ``(Y, v)`` with ``Z = 0``."""
    dt = p.grid.dt
    q = np.einsum("kip,kij,kjp->kp", Y, _node_weights(p, "Q"), Y)
    s3 = 2.0 * np.einsum("kip,kij,kjp->kp", V, _node_weights(p, "S3"), Y)
    r = np.einsum("kip,kij,kjp->kp", V, _node_weights(p, "R"), V)
    g = np.einsum("ip,ij,jp->p", Y[0], p.G, Y[0])
    zero = np.zeros_like(g)
    return dict(G=g, Q=_trapz(q, dt, 0), S1=zero, S2=zero, S3=_trapz(s3, dt, 0), N1=zero, N2=zero,
                R=_trapz(r, dt, 0))


def cost_of_deterministic_control(p, v, xi=None, substeps: int = 4) -> CostBreakdown:
    """Cost of a deterministic control with deterministic terminal data.

    The state equation reduces to ``Y' = A Y + B v`` with ``Z1 = Z2 = 0``;
    ``Y`` is integrated by RK4 and the cost by the trapezoid rule.

    Parameters
    ----------
    p : LQProblem or TransformedProblem
    v : callable, MatrixPath, node array or constant vector
    xi : Deterministic or array_like, optional
        Defaults to zero.
    """
    xi_vec = _deterministic_xi(xi, p.n)
    Y, V = _deterministic_states(p, [_as_callable(v, p.grid, p.m)], xi_vec, substeps)
    terms = {k: float(val[0]) for k, val in _deterministic_breakdown(p, Y, V).items()}
    return CostBreakdown(terms)


def _deterministic_xi(xi, n):
    if xi is None:
        return np.zeros(n)
    if isinstance(xi, Deterministic):
        return xi.c
    if isinstance(xi, AffineInTerminalBM):
        if np.any(xi.b1) or np.any(xi.b2):
            raise ValueError("terminal condition is not deterministic")
        return xi.c
    return np.asarray(xi, dtype=float).reshape(n)


@dataclass(frozen=True)
class ConvexityReport:
    ratios: np.ndarray
    delta_hat: float
    violated: bool

    def __str__(self):
        flag = "VIOLATED" if self.violated else "no violation found"
        return f"empirical upper bound on the convexity constant: {self.delta_hat:.6g} ({flag})"


def convexity_probe(p, probes: Sequence, substeps: int = 4) -> ConvexityReport:
    """``min J(0; v) / int |v|^2`` over the probes.

    The minimum is an upper bound on the true uniform convexity constant,
    never a certificate of it. A ratio ``<= 0`` flags a violation.
    """
    if len(probes) == 0:
        raise ValueError("no probes supplied")
    controls = [_as_callable(v, p.grid, p.m) for v in probes]
    Y, V = _deterministic_states(p, controls, np.zeros(p.n), substeps)
    norms = _trapz(np.einsum("kip,kip->kp", V, V), p.grid.dt, 0)
    if np.any(norms <= 0):
        raise ValueError(f"probe {int(np.argmin(norms))} has zero norm")
    terms = _deterministic_breakdown(p, Y, V)
    J = sum(terms.values())
    ratios = J / norms
    d = float(ratios.min())
    return ConvexityReport(ratios, d, bool(d <= 0))


# Monte-Carlo costs -----------------------------------------------------------


def _path_terms(p, Y, Z1, Z2, u):
    """Per-path cost terms; arrays have shape ``(M, N+1, dim)``."""
    dt = p.grid.dt

    def quad(x, name, y=None):
        y = x if y is None else y
        return _trapz(np.einsum("mki,kij,mkj->mk", x, _node_weights(p, name), y), dt)

    return dict(
        G=np.einsum("mi,ij,mj->m", Y[:, 0], p.G, Y[:, 0]),
        Q=quad(Y, "Q"),
        S1=2.0 * quad(Z1, "S1", Y),
        S2=2.0 * quad(Z2, "S2", Y),
        S3=2.0 * quad(u, "S3", Y),
        N1=quad(Z1, "N1"),
        N2=quad(Z2, "N2"),
        R=quad(u, "R"),
    )


def _summarize(per_path: dict) -> CostBreakdown:
    M = next(iter(per_path.values())).shape[0]
    total = sum(per_path.values())
    return CostBreakdown(
        {k: float(v.mean()) for k, v in per_path.items()},
        {k: float(v.std(ddof=1) / np.sqrt(M)) for k, v in per_path.items()},
        float(total.std(ddof=1) / np.sqrt(M)),
    )


def ensemble_cost(p, ens) -> CostBreakdown:
    """Monte-Carlo cost of the ensemble's control under the weights of ``p``."""
    return _summarize(_path_terms(p, ens.Y, ens.Z1, ens.Z2, ens.u))


def stationarity_residual(ens, tp):
    """``E int |S3 Y_hat - B^T X_hat + R u|^2 dt`` and its standard error.

    Uses the weights of the simplified cost; ``Y_hat = -Gamma X_hat + phi_hat``.
    """
    S3, B, R = tp.S3.values, tp.B.values, tp.R.values
    r = (
        np.einsum("kij,mkj->mki", S3, ens.Y_hat)
        - np.einsum("kji,mkj->mki", B, ens.X_hat)
        + np.einsum("kij,mkj->mki", R, ens.u)
    )
    per_path = _trapz(np.einsum("mki,mki->mk", r, r), tp.grid.dt)
    return float(per_path.mean()), float(per_path.std(ddof=1) / np.sqrt(per_path.shape[0]))


@dataclass(frozen=True)
class PerturbationReport:
    """Rows ``(eps, dJ, eps^2 J(0; v), residual, se)``."""

    rows: tuple
    j0: float

    @property
    def passed(self) -> bool:
        return all(abs(res) <= 3.0 * se for _, _, _, res, se in self.rows)

    def __str__(self):
        lines = ["eps,dJ,eps2_J0,residual,se"]
        lines += [f"{e:+.4g},{dj:.8g},{q:.8g},{r:.3e},{se:.3e}" for e, dj, q, r, se in self.rows]
        return "\n".join(lines)


def perturbation_expansion_check(p, ens, v, eps: Sequence[float], substeps: int = 4) -> PerturbationReport:
    """Second-order expansion of the cost around the ensemble's control.

    For a deterministic direction ``v`` the perturbed state is
    ``Y* + eps Y_v`` with ``Y_v' = A Y_v + B v``, ``Y_v(T) = 0`` and
    unchanged ``Z``, so ``J(xi; u* + eps v)`` is evaluated path by path.
    At a stationary point ``J(xi; u*+eps v) - J(xi; u*) - eps^2 J(0; v)``
    vanishes up to Monte-Carlo error.
    """
    if not (callable(v) or isinstance(v, (MatrixPath, np.ndarray, list, tuple, float, int))):
        raise TypeError("perturbation direction must be a deterministic control")
    if isinstance(v, np.ndarray) and v.ndim >= 2 and v.shape[0] != p.grid.steps + 1:
        raise TypeError("perturbation direction must be deterministic (one value per node)")
    vf = _as_callable(v, p.grid, p.m)
    Yv, Vv = _deterministic_states(p, [vf], np.zeros(p.n), substeps)
    Yv, Vv = Yv[:, :, 0], Vv[:, :, 0]
    j0 = float(sum(_deterministic_breakdown(p, Yv[:, :, None], Vv[:, :, None]).values())[0])
    base = sum(_path_terms(p, ens.Y, ens.Z1, ens.Z2, ens.u).values())
    rows = []
    for e in eps:
        e = float(e)
        pert = sum(_path_terms(p, ens.Y + e * Yv[None], ens.Z1, ens.Z2, ens.u + e * Vv[None]).values())
        diff = pert - base - e * e * j0
        se = float(diff.std(ddof=1) / np.sqrt(diff.shape[0]))
        rows.append((e, float((pert - base).mean()), e * e * j0, float(diff.mean()), se))
    return PerturbationReport(tuple(rows), j0)


def inject_control(p, ens, v, substeps: int = 4):
    """Shift the ensemble's control by a deterministic ``v``.

    The state moves by the deterministic response ``Y_v`` (``Y_v(T) = 0``,
    ``Z`` unchanged), so the result is again an admissible state-control
    pair, just not the optimal one.
    """
    vf = _as_callable(v, p.grid, p.m)
    Yv, Vv = _deterministic_states(p, [vf], np.zeros(p.n), substeps)
    Yv, Vv = Yv[None, :, :, 0], Vv[None, :, :, 0]
    return replace(
        ens,
        Y=ens.Y + Yv,
        Y_hat=ens.Y_hat + Yv,
        u=ens.u + Vv,
        provenance={**ens.provenance, "injected": True},
    )


# value formula --------------------------------------------------------------


@dataclass(frozen=True)
class ValueReport:
    value: float  # value of the original problem
    value_transformed: float
    correction: float  # E<Phi(T) xi, xi>
    terms: dict
    se: float = 0.0


def value_formula(gs, adjoint, tp, original=None, ensemble=None) -> ValueReport:
    """Closed-form value of the problem.

    The simplified problem has value::

        E int ( -<M phi_hat, phi_hat> + 2 <S2^T (N_G^{-1} - I) beta2_hat, phi_hat>
                + 2 <S1^T beta1 + S2^T beta2, phi>
                + <N1 beta1, beta1> + <N2 beta2, beta2>
                + <N2 (N_G^{-1} - I) beta2_hat, beta2_hat> ) dt,

        M = S2^T N_G^{-1} Gamma S2 + S3^T R^{-1} S3,

    and the original value is that minus ``E<Phi(T) xi, xi>``. Moments are
    exact for the affine adjoint and Monte-Carlo means for a sampled one
    (``ensemble`` required).
    """
    if original is not None and original is not tp.base:
        if original.grid != tp.grid:
            raise ValueError("original problem lives on a different grid")
    grid = tp.grid
    n = tp.n
    eye = np.eye(n)
    T = lambda m: np.swapaxes(m, -1, -2)
    G = gs.gamma.values
    ngi = gs.n_gamma_inv.values
    S1, S2, S3 = tp.S1.values, tp.S2.values, tp.S3.values
    N1, N2 = tp.N1.values, tp.N2.values
    r_inv = np.stack([safe_inverse(r, what="R")[0] for r in tp.R.values])
    Mb = T(S2) @ ngi @ G @ S2 + T(S3) @ r_inv @ S3
    E2 = T(S2) @ (ngi - eye)
    F2 = N2 @ (ngi - eye)
    t = grid.nodes

    if getattr(adjoint, "kind", None) == "affine":
        p_, q1, q2 = adjoint.p, adjoint.q1, adjoint.q2
        quad = lambda Mx, a, b: np.einsum("kij,ki,kj->k", Mx, a, b)
        integrand = dict(
            phi_hat=-(quad(Mb, p_, p_) + t * quad(Mb, q2, q2)),
            cross_hat=2.0 * quad(T(E2), p_, q2),
            cross=2.0 * (quad(T(S1), p_, q1) + quad(T(S2), p_, q2)),
            N1=quad(N1, q1, q1),
            N2=quad(N2, q2, q2),
            filter=quad(F2, q2, q2),
        )
        terms = {k: float(_trapz(v, grid.dt)) for k, v in integrand.items()}
        se = 0.0
        xi = adjoint.terminal
        correction = tp.terminal_correction(xi)
    else:
        if ensemble is None:
            raise ValueError("a sampled adjoint needs its ensemble")
        d = adjoint.on_ensemble(ensemble)
        quad = lambda Mx, a, b: np.einsum("kij,mki,mkj->mk", Mx, a, b)
        per_path = dict(
            phi_hat=-quad(Mb, d["phi_hat"], d["phi_hat"]),
            cross_hat=2.0 * quad(T(E2), d["phi_hat"], d["beta2_hat"]),
            cross=2.0 * (quad(T(S1), d["phi"], d["beta1"]) + quad(T(S2), d["phi"], d["beta2"])),
            N1=quad(N1, d["beta1"], d["beta1"]),
            N2=quad(N2, d["beta2"], d["beta2"]),
            filter=quad(F2, d["beta2_hat"], d["beta2_hat"]),
        )
        per_path = {k: _trapz(v, grid.dt) for k, v in per_path.items()}
        total = sum(per_path.values())
        terms = {k: float(v.mean()) for k, v in per_path.items()}
        se = float(total.std(ddof=1) / np.sqrt(total.shape[0]))
        correction = tp.terminal_correction(tp.base.terminal, ensemble)
    vphi = float(sum(terms.values()))
    return ValueReport(vphi - correction, vphi, correction, terms, se)


def require(condition: bool, message: str):
    """Raise :class:`VerificationFailed` unless ``condition`` holds."""
    if not condition:
        raise VerificationFailed(message)
