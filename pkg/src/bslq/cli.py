"""Command-line entry point: ``bslq {solve,verify,oracle,sweep-lambda} PROBLEM``.

Each subcommand writes CSV artifacts to the output directory (``--out``,
else ``$BSLQ_OUTPUT_DIR``, else ``./bslq-out``) plus a ``manifest.json``
with body hashes. Failures print one diagnostic line to stderr and exit
with the status of the error class (see :mod:`bslq.errors`).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .adjoint import RegressionBasis, assemble_drift_kernels, solve_affine_terminal, solve_lsmc_terminal
from .config import RunConfig, load_problem, load_run_config
from .errors import (
    BlowUpError,
    BslqError,
    LambdaTooSmallError,
    OracleOverflowError,
    ValidationError,
    VerificationFailed,
)
from .forward import apply_cost_transform, check_lambda_monotonicity, sweep_lambda
from .gamma import solve_gamma_direct, validate_gamma
from .io import check_manifest, matrix_columns, read_csv, write_csv, write_manifest, write_matrix_path
from .oracle import MAX_TREE_SIZE, tree_oracle
from .problem import AffineInTerminalBM, problem_hash, validate_problem
from .simulate import BrownianEnsemble, assemble_closed_loop, reconstruct_optimal, simulate_x, simulate_xhat
from .verify import (
    convexity_probe,
    ensemble_cost,
    inject_control,
    perturbation_expansion_check,
    random_polynomial_probes,
    stationarity_residual,
    value_formula,
)

__all__ = ["main", "run_solve", "run_verify", "run_oracle", "run_sweep", "solve_pipeline", "PipelineResult"]

DUMP_PATHS = 5


@dataclass
class PipelineResult:
    cfg: RunConfig
    problem: object
    tp: object
    sweep: tuple
    gs: object
    kernels: object
    adjoint: object
    ensemble: object
    clc: object
    solution: object
    value: object
    mc_cost: object


def _provenance(cfg: RunConfig, problem, **extra) -> dict:
    prov = {
        "problem_hash": problem_hash(problem),
        "grid": f"T={problem.grid.horizon!r} N={problem.grid.steps} substeps={cfg.substeps}",
        "seed": cfg.seed,
        "versions": f"bslq={__version__} numpy={np.__version__} scipy={scipy.__version__}",
    }
    prov.update(extra)
    if cfg.timestamps:
        prov["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return prov


def _lambda_sweep(cfg, tp):
    entries, failures = sweep_lambda(
        tp, cfg.lambda_start, cfg.lambda_factor, cfg.lambda_count, cfg.substeps, cfg.lambda_floor
    )
    return entries, failures


def solve_pipeline(cfg: RunConfig, require_lambda: bool = True) -> PipelineResult:
    """Load, validate, transform, sweep, solve Gamma and the adjoint, simulate."""
    problem = load_problem(cfg.problem_file, cfg.steps)
    report = validate_problem(problem)
    if not report.passed:
        raise ValidationError("; ".join(f"{c.name}: {c.detail}" for c in report.failures))
    tp = apply_cost_transform(problem, cfg.substeps)
    entries, failures = _lambda_sweep(cfg, tp)
    if require_lambda and not entries:
        last = failures[max(failures)]
        raise LambdaTooSmallError(f"no admissible lambda in the sweep; largest tried: {last}")
    gs = solve_gamma_direct(tp, cfg.substeps)
    res = validate_gamma(gs, tp, cfg.gamma_tol)
    if not res.passed:
        raise BlowUpError(
            f"Gamma residual check failed: max defect {res.max_residual:.3e} at node {res.worst_node}, "
            f"min eigenvalue {res.min_eig:.3e}, identity error {res.identity_error:.3e}"
        )
    kernels = assemble_drift_kernels(gs, tp)
    ensemble = BrownianEnsemble.generate(tp.grid, cfg.paths, cfg.seed)
    xi = problem.terminal
    use_affine = cfg.adjoint == "affine" or (cfg.adjoint == "auto" and isinstance(xi, AffineInTerminalBM))
    if use_affine:
        adjoint = solve_affine_terminal(tp, gs, kernels, xi, cfg.substeps)
    else:
        adjoint = solve_lsmc_terminal(tp, gs, kernels, xi, ensemble, RegressionBasis(cfg.basis_degree))
    clc = assemble_closed_loop(gs, adjoint, tp, ensemble)
    xhat = simulate_xhat(clc, ensemble)
    X = simulate_x(clc, ensemble, xhat)
    solution = reconstruct_optimal(gs, adjoint, xhat, clc, ensemble, X)
    value = value_formula(gs, adjoint, tp, ensemble=ensemble)
    mc = ensemble_cost(problem, solution)
    return PipelineResult(cfg, problem, tp, (entries, failures), gs, kernels, adjoint, ensemble, clc,
                          solution, value, mc)


# artifacts ------------------------------------------------------------------


def _sweep_rows(entries, failures):
    rows = [(e.lam, "admissible", e.margin, "") for e in entries]
    rows += [(lam, "rejected", float("nan"), msg.replace(",", ";")) for lam, msg in failures.items()]
    return sorted(rows, key=lambda r: r[0])


def _write_sweep(path, entries, failures, prov) -> str:
    # PSD-order gap to the previous admissible lambda
    ordered = sorted(entries, key=lambda e: e.lam)
    step = {}
    for a, b in zip(ordered, ordered[1:]):
        _, _, d1, d2 = check_lambda_monotonicity([a, b]).pairs[0]
        step[b.lam] = (d1, d2)
    rows = []
    for lam, status, margin, msg in _sweep_rows(entries, failures):
        d1, d2 = step.get(lam, (float("nan"), float("nan")))
        rows.append((lam, status, margin, d1, d2, msg or "-"))
    cols = ["lambda", "status", "block_margin", "min_eig_dP1", "min_eig_dP2", "diagnostic"]
    return write_csv(path, cols, rows, prov)


def _adjoint_table(res: PipelineResult):
    adj = res.adjoint
    n = res.tp.n
    t = res.tp.grid.nodes
    if adj.kind == "affine":
        names = ("p", "q1", "q2")
        blocks = [adj.p, adj.q1, adj.q2]
    else:
        names = ("phi", "phi_hat", "beta1", "beta2", "beta1_hat", "beta2_hat")
        blocks = [getattr(adj, nm).mean(axis=0) for nm in names]
    cols = ["t"] + [f"{nm}[{i}]" for nm in names for i in range(n)]
    return cols, np.column_stack([t] + blocks)


def _coefficients_table(res: PipelineResult):
    clc, k = res.clc, res.kernels
    t = res.tp.grid.nodes
    named = [("A_tilde", clc.A_tilde), ("C1_tilde", clc.C1_tilde), ("C2_tilde", clc.C2_tilde),
             ("K", k.K.values), ("L1", k.L1.values), ("L2", k.L2.values)]
    cols = ["t"] + [c for nm, arr in named for c in matrix_columns(nm, arr.shape[1:])]
    data = np.column_stack([t] + [arr.reshape(len(t), -1) for _, arr in named])
    return cols, data


def _path_rows(sol, count):
    count = min(count, sol.paths)
    t = sol.grid.nodes
    parts = [sol.X_hat, sol.Y, sol.Z1, sol.Z2, sol.u]
    if sol.X is not None:
        parts.insert(0, sol.X)
    rows = []
    for j in range(count):
        block = np.column_stack([np.full(len(t), j), t] + [p[j] for p in parts])
        rows.extend(block)
    n, m = sol.Y.shape[2], sol.u.shape[2]
    names = (["X"] if sol.X is not None else []) + ["X_hat", "Y", "Z1", "Z2"]
    cols = ["path", "t"] + [f"{nm}[{i}]" for nm in names for i in range(n)] + [f"u[{i}]" for i in range(m)]
    return cols, rows


def _value_rows(res: PipelineResult):
    v, mc = res.value, res.mc_cost
    rows = [("value_formula", v.value, v.se), ("value_transformed", v.value_transformed, v.se),
            ("terminal_correction", v.correction, 0.0), ("mc_cost", mc.total, mc.total_se)]
    rows += [(f"formula_term_{k}", val, 0.0) for k, val in v.terms.items()]
    rows += [(f"mc_term_{k}", val, mc.se[k]) for k, val in mc.terms.items()]
    return ["quantity", "value", "standard_error"], rows


def write_solve_artifacts(res: PipelineResult, out: Path) -> dict:
    cfg, p = res.cfg, res.problem
    prov = _provenance(cfg, p, paths=cfg.paths, adjoint=res.adjoint.kind)
    gs = res.gs
    hashes = {
        "phi.csv": write_matrix_path(out / "phi.csv", res.tp.phi, "Phi", prov),
        "gamma.csv": write_matrix_path(
            out / "gamma.csv", gs.gamma, "Gamma", prov,
            {"gamma_min_eig": gs.gamma.min_eigenvalues(), "n_gamma_min_sv": gs.singular_values},
        ),
        "lambda_sweep.csv": _write_sweep(out / "lambda_sweep.csv", *res.sweep, prov),
    }
    cols, data = _adjoint_table(res)
    hashes["adjoint.csv"] = write_csv(out / "adjoint.csv", cols, data, prov)
    cols, data = _coefficients_table(res)
    hashes["coefficients.csv"] = write_csv(out / "coefficients.csv", cols, data, prov)
    cols, rows = _path_rows(res.solution, DUMP_PATHS)
    hashes["paths.csv"] = write_csv(out / "paths.csv", cols, rows, prov)
    cols, rows = _value_rows(res)
    hashes["value.csv"] = write_csv(out / "value.csv", cols, rows, prov)
    write_manifest(out, hashes, {"problem_hash": problem_hash(p), "seed": cfg.seed, "paths": cfg.paths})
    return hashes


# commands -------------------------------------------------------------------


def run_solve(cfg: RunConfig) -> int:
    res = solve_pipeline(cfg)
    out = Path(cfg.output_dir)
    write_solve_artifacts(res, out)
    print(f"value {res.value.value:.10g} (Monte-Carlo cost {res.mc_cost.total:.10g} +- {res.mc_cost.total_se:.2g})")
    print(f"artifacts written to {out}")
    return 0


def _check_existing(cfg: RunConfig, res: PipelineResult, out: Path):
    """Hash check of earlier solve artifacts, then agreement with the recomputation."""
    doc = check_manifest(out)
    if doc.get("problem_hash") != problem_hash(res.problem):
        raise ValidationError("artifacts in the output directory belong to a different problem")
    if "gamma.csv" in doc.get("files", {}):
        _, _, rows = read_csv(out / "gamma.csv")
        stored = np.array(rows, dtype=float)
        n = res.tp.n
        fresh = res.gs.gamma.values.reshape(len(res.tp.grid.nodes), -1)
        if stored.shape[0] != fresh.shape[0] or not np.allclose(stored[:, 1:1 + n * n], fresh, rtol=1e-10, atol=1e-12):
            raise ValidationError("stored Gamma does not match the recomputed one")


def _tree_gaps(cfg, problem, value):
    rows = []
    for steps in range(1, cfg.tree_max + 1):
        if problem.n * 4**steps > MAX_TREE_SIZE:
            break
        r = tree_oracle(problem, steps)
        rows.append((steps, r.value, abs(r.value - value), r.hessian_margin))
    return rows


def run_verify(cfg: RunConfig) -> int:
    res = solve_pipeline(cfg)
    out = Path(cfg.output_dir)
    if (out / "manifest.json").exists():
        _check_existing(cfg, res, out)
    p, tp, sol = res.problem, res.tp, res.solution
    if cfg.inject_offset:
        sol = inject_control(p, sol, np.full(p.m, cfg.inject_offset), cfg.substeps)
    k = cfg.se_multiplier
    rows = []

    rho, rho_se = stationarity_residual(sol, tp)
    rows.append(("stationarity", rho, cfg.stationarity_tol, rho <= cfg.stationarity_tol))

    pert = perturbation_expansion_check(p, sol, np.ones(p.m), cfg.perturbation_eps, cfg.substeps)
    for e, _, _, r, se in pert.rows:
        rows.append((f"perturbation_eps={e:+g}", r, k * se, abs(r) <= k * se))

    probes = random_polynomial_probes(p.m, p.grid.horizon, cfg.probes, seed=cfg.seed)
    conv = convexity_probe(p, probes, cfg.substeps)
    rows.append(("convexity_delta_hat", conv.delta_hat, 0.0, not conv.violated))

    diff = res.value.value - res.mc_cost.total
    se = float(np.hypot(res.value.se, res.mc_cost.total_se))
    rows.append(("value_vs_mc", diff, k * se, abs(diff) <= k * se))

    try:
        tree = _tree_gaps(cfg, p, res.value.value)
    except VerificationFailed as exc:
        rows.append(("tree_oracle", float("nan"), 0.0, False))
        print(f"tree oracle: {exc}", file=sys.stderr)
        tree = []
    for steps, val, gap, _ in tree:
        rows.append((f"tree_gap_N={steps}", gap, float("nan"), True))
    if len(tree) >= 2:
        rows.append(("tree_gap_shrinks", tree[-1][2] - tree[0][2], 0.0, tree[-1][2] < tree[0][2]))

    prov = _provenance(cfg, p, paths=cfg.paths, inject_offset=cfg.inject_offset)
    out_rows = [(name, stat, thr, "pass" if ok else "fail") for name, stat, thr, ok in rows]
    h = write_csv(out / "verification.csv", ["check", "statistic", "threshold", "status"], out_rows, prov)
    write_manifest(out, {"verification.csv": h}, {"problem_hash": problem_hash(p)}, merge=True)
    failed = [r[0] for r in rows if not r[3]]
    for name, stat, thr, ok in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {stat:.6g} (threshold {thr:.3g})")
    print(str(conv))
    if failed:
        raise VerificationFailed(f"checks failed: {', '.join(failed)}")
    return 0


def run_oracle(cfg: RunConfig) -> int:
    problem = load_problem(cfg.problem_file, cfg.steps)
    report = validate_problem(problem)
    if not report.passed:
        raise ValidationError("; ".join(f"{c.name}: {c.detail}" for c in report.failures))
    size = problem.n * 4**cfg.tree_max
    if size > MAX_TREE_SIZE:
        raise OracleOverflowError(
            f"tree with n={problem.n}, steps={cfg.tree_max} has {size} state entries (limit {MAX_TREE_SIZE})"
        )
    try:
        tp = apply_cost_transform(problem, cfg.substeps)
        gs = solve_gamma_direct(tp, cfg.substeps)
        adj = solve_affine_terminal(tp, gs, assemble_drift_kernels(gs, tp), problem.terminal, cfg.substeps)
        formula = value_formula(gs, adj, tp).value
    except BslqError as exc:
        print(f"formula value unavailable: {exc}", file=sys.stderr)
        formula = float("nan")
    rows = []
    for steps in range(2, cfg.tree_max + 1):
        r = tree_oracle(problem, steps)
        rows.append((steps, r.value, formula, r.value - formula, r.hessian_margin, r.condition))
        print(f"N_tree={steps}: value {r.value:.10g}, gap {r.value - formula:.3e}")
    out = Path(cfg.output_dir)
    prov = _provenance(cfg, problem)
    h = write_csv(out / "oracle.csv", ["tree_steps", "tree_value", "formula_value", "gap", "hessian_margin", "condition"],
                  rows, prov)
    write_manifest(out, {"oracle.csv": h}, {"problem_hash": problem_hash(problem)}, merge=True)
    return 0


def run_sweep(cfg: RunConfig) -> int:
    problem = load_problem(cfg.problem_file, cfg.steps)
    report = validate_problem(problem)
    if not report.passed:
        raise ValidationError("; ".join(f"{c.name}: {c.detail}" for c in report.failures))
    tp = apply_cost_transform(problem, cfg.substeps)
    entries, failures = _lambda_sweep(cfg, tp)
    out = Path(cfg.output_dir)
    h = _write_sweep(out / "lambda_sweep.csv", entries, failures, _provenance(cfg, problem))
    write_manifest(out, {"lambda_sweep.csv": h}, {"problem_hash": problem_hash(problem)}, merge=True)
    for lam, status, margin, msg in _sweep_rows(entries, failures):
        print(f"lambda={lam:g}: {status}" + (f" (margin {margin:.3e})" if status == "admissible" else f" ({msg})"))
    if not entries:
        raise LambdaTooSmallError("no admissible lambda in the sweep")
    return 0


COMMANDS = {"solve": run_solve, "verify": run_verify, "oracle": run_oracle, "sweep-lambda": run_sweep}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bslq", description="Backward stochastic LQ control with partial information.")
    ap.add_argument("--version", action="version", version=f"bslq {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("problem", help="problem file")
        sp.add_argument("--out", dest="output_dir", help="output directory")
        sp.add_argument("--steps", type=int, help="override [grid] steps")
        sp.add_argument("--substeps", type=int)
        sp.add_argument("--timestamps", action="store_true", default=None, help="add creation time to CSV headers")
        if name in ("solve", "verify"):
            sp.add_argument("--paths", type=int)
            sp.add_argument("--seed", type=int)
            sp.add_argument("--basis-degree", dest="basis_degree", type=int)
            sp.add_argument("--adjoint", choices=("auto", "affine", "lsmc"))
        if name in ("solve", "verify", "sweep-lambda"):
            sp.add_argument("--lambda-start", dest="lambda_start", type=float)
            sp.add_argument("--lambda-factor", dest="lambda_factor", type=float)
            sp.add_argument("--lambda-count", dest="lambda_count", type=int)
        if name in ("verify", "oracle"):
            sp.add_argument("--tree-max", dest="tree_max", type=int)
        if name == "verify":
            sp.add_argument("--probes", type=int)
            sp.add_argument("--inject-offset", dest="inject_offset", type=float,
                            help="shift the optimal control by a constant (negative control)")
    return ap


def main(argv: Optional[list] = None) -> int:
    args = vars(_parser().parse_args(argv))
    command = args.pop("command")
    problem = args.pop("problem")
    try:
        cfg = load_run_config(problem, command, **args)
        return COMMANDS[command](cfg)
    except BslqError as exc:
        print(f"bslq: {exc.tag}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
