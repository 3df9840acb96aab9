import numpy as np
import pytest

from bslq import AffineInTerminalBM, TimeGrid, apply_cost_transform, example_problem_1, solve_gamma_direct
from bslq.adjoint import assemble_drift_kernels, solve_affine_terminal

XI_W1_W2 = AffineInTerminalBM([0.0], [1.0], [1.0])


def scalar_problem(grid, **kw):
    """Scalar problem with zero defaults; keyword values are plain floats."""
    from bslq import build_problem

    base = dict(A=0.0, B=0.0, C1=0.0, C2=0.0, G=0.0, Q=0.0, S1=0.0, S2=0.0, S3=0.0, N1=0.0, N2=0.0, R=1.0)
    base.update(kw)
    terminal = base.pop("terminal", None)
    return build_problem(grid, terminal=terminal, **{k: [[float(v)]] for k, v in base.items()})


@pytest.fixture(scope="session")
def ex1_chain():
    """Scalar example with xi = W1(1) + W2(1) on N = 100: problem, transform, Gamma, kernels, adjoint."""
    p = example_problem_1(TimeGrid(1.0, 100)).with_terminal(XI_W1_W2)
    tp = apply_cost_transform(p)
    gs = solve_gamma_direct(tp)
    kernels = assemble_drift_kernels(gs, tp)
    adj = solve_affine_terminal(tp, gs, kernels, p.terminal)
    return dict(p=p, tp=tp, gs=gs, kernels=kernels, adj=adj)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> bool:
    """Store one acceptance verdict for the terminal summary."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
