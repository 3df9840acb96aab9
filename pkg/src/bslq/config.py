"""Problem files and run settings.

A problem file is INI-style; every value is JSON. Matrices are nested
row-major arrays, scalars are promoted to ``1x1``, and a time-varying
coefficient is a list of ``[t, matrix]`` breakpoints (piecewise constant,
first breakpoint at ``t = 0``)::

    [dims]
    n = 1
    m = 1

    [grid]
    horizon = 1.0
    steps = 200
    substeps = 4

    [coeffs]
    A = [[1.0]]
    B = [[1.0]]
    C1 = [[0.0]]
    C2 = [[0.0]]

    [weights]
    G = [[-1.0]]
    Q = [[-1.0]]
    N1 = [[-1.0]]
    N2 = [[-1.0]]
    R = [[5.0]]

    [terminal]
    c = [0.0]
    b1 = [1.0]
    b2 = [1.0]

    [run]
    paths = 20000
    seed = 7

Omitted cross terms and weights are zero; an omitted ``[terminal]`` means
``xi = 0``. ``[run]`` keys mirror :class:`RunConfig` fields.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .paths import TimeGrid
from .problem import AffineInTerminalBM, LQProblem, build_problem

__all__ = ["RunConfig", "load_problem", "load_run_config", "OUTPUT_ENV", "DEFAULT_OUTPUT"]

OUTPUT_ENV = "BSLQ_OUTPUT_DIR"
DEFAULT_OUTPUT = "bslq-out"

_COEFFS = ("A", "B", "C1", "C2")
_WEIGHTS = ("G", "Q", "S1", "S2", "S3", "N1", "N2", "R")
_KNOWN = {
    "dims": {"n", "m"},
    "grid": {"horizon", "steps", "substeps"},
    "coeffs": set(_COEFFS),
    "weights": set(_WEIGHTS),
    "terminal": {"c", "b1", "b2"},
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs besides the problem data."""

    problem_file: Path
    command: str = "solve"
    steps: Optional[int] = None
    substeps: int = 4
    paths: int = 20000
    seed: int = 7
    basis_degree: int = 2
    adjoint: str = "auto"  # auto | affine | lsmc
    lambda_start: float = 1.0
    lambda_factor: float = 2.0
    lambda_count: int = 8
    lambda_floor: float = 1e-8
    tree_max: int = 4
    probes: int = 100
    perturbation_eps: tuple = (-0.5, -0.1, 0.1, 0.5)
    se_multiplier: float = 3.0
    stationarity_tol: float = 1e-20
    gamma_tol: float = 1e-4
    inject_offset: float = 0.0
    output_dir: Path = field(default_factory=lambda: Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)))
    timestamps: bool = False

    def __post_init__(self):
        if not Path(self.problem_file).exists():
            raise ConfigError(f"problem file not found: {self.problem_file}")
        positive = ("substeps", "paths", "lambda_start", "lambda_count", "tree_max", "probes",
                    "se_multiplier", "stationarity_tol", "gamma_tol", "lambda_floor")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.steps is not None and not self.steps > 0:
            raise ConfigError(f"steps must be positive, got {self.steps!r}")
        if self.lambda_factor <= 1:
            raise ConfigError(f"lambda_factor must exceed 1, got {self.lambda_factor!r}")
        if self.basis_degree < 0:
            raise ConfigError("basis_degree must be non-negative")
        if self.adjoint not in ("auto", "affine", "lsmc"):
            raise ConfigError(f"adjoint must be auto, affine or lsmc, got {self.adjoint!r}")


def _read(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep matrix names case-sensitive
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read problem file {path}: {exc}") from exc
    return parser


def _value(parser, section, key):
    if not parser.has_option(section, key):
        raise ConfigError(f"missing key [{section}] {key}")
    raw = parser.get(section, key)
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"[{section}] {key}: not valid JSON ({exc.msg})") from exc


def _int(value, what):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"{what} must be an integer, got {value!r}")
    return int(value)


def load_problem(path, steps: Optional[int] = None) -> LQProblem:
    """Read a problem file into an :class:`LQProblem`.

    ``steps`` overrides ``[grid] steps``.

    Raises
    ------
    ConfigError
        Missing sections or keys, unknown keys, malformed values or
        dimension mismatches.
    """
    parser = _read(path)
    for section in ("dims", "grid", "coeffs", "weights"):
        if not parser.has_section(section):
            raise ConfigError(f"missing section [{section}]")
    for section, allowed in _KNOWN.items():
        if parser.has_section(section):
            unknown = set(parser.options(section)) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")

    n = _int(_value(parser, "dims", "n"), "[dims] n")
    m = _int(_value(parser, "dims", "m"), "[dims] m")
    if n < 1 or m < 1:
        raise ConfigError("dimensions must be positive")
    horizon = float(_value(parser, "grid", "horizon")) if parser.has_option("grid", "horizon") else 1.0
    N = steps if steps is not None else _value(parser, "grid", "steps")
    N = _int(N, "[grid] steps")
    try:
        grid = TimeGrid(horizon, N)
    except ValueError as exc:
        raise ConfigError(f"bad grid: {exc}") from exc

    specs = {}
    for section, names in (("coeffs", _COEFFS), ("weights", _WEIGHTS)):
        for name in names:
            if parser.has_option(section, name):
                specs[name] = _value(parser, section, name)
    for required in ("A", "B", "R"):
        if required not in specs:
            raise ConfigError(f"missing required matrix {required}")

    if parser.has_section("terminal"):
        vec = {k: _value(parser, "terminal", k) for k in ("c", "b1", "b2") if parser.has_option("terminal", k)}
        zeros = [0.0] * n
        try:
            terminal = AffineInTerminalBM(vec.get("c", zeros), vec.get("b1", zeros), vec.get("b2", zeros))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[terminal]: {exc}") from exc
    else:
        terminal = AffineInTerminalBM(np.zeros(n), np.zeros(n), np.zeros(n))

    try:
        problem = build_problem(grid, terminal=None, **specs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"cannot build problem: {exc}") from exc
    if (problem.n, problem.m) != (n, m):
        raise ConfigError(f"[dims] says n={n}, m={m} but A, B give n={problem.n}, m={problem.m}")
    if terminal.n != n:
        raise ConfigError(f"terminal vectors have length {terminal.n}, expected {n}")
    return problem.with_terminal(terminal)


def load_run_config(path, command: str = "solve", **overrides) -> RunConfig:
    """Merge ``[grid] substeps`` and ``[run]`` from the file with CLI overrides.

    Overrides equal to ``None`` are ignored.
    """
    parser = _read(path)
    names = {f.name: f for f in fields(RunConfig)}
    values = {}
    if parser.has_option("grid", "substeps"):
        values["substeps"] = _value(parser, "grid", "substeps")
    if parser.has_section("run"):
        for key in parser.options("run"):
            if key not in names or key in ("problem_file", "command"):
                raise ConfigError(f"unknown key in [run]: {key}")
            values[key] = _value(parser, "run", key)
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("substeps", "paths", "seed", "basis_degree", "lambda_count", "tree_max", "probes", "steps"):
        if key in values:
            values[key] = _int(values[key], key)
    if "perturbation_eps" in values:
        values["perturbation_eps"] = tuple(float(e) for e in values["perturbation_eps"])
    if "output_dir" in values:
        values["output_dir"] = Path(values["output_dir"])
    try:
        return RunConfig(problem_file=Path(path), command=command, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
