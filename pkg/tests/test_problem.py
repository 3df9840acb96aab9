import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bslq import (
    AffineInTerminalBM,
    Deterministic,
    MatrixPath,
    SampledFunctional,
    TimeGrid,
    build_problem,
    example_problem_1,
    problem_hash,
    validate_problem,
)
from bslq.problem import Dimensions, sample_coefficient


def test_example_passes_all_checks():
    rep = validate_problem(example_problem_1(TimeGrid(1.0, 100)))
    assert rep.passed, str(rep)


def test_example_weights():
    p = example_problem_1(TimeGrid(1.0, 100))
    assert np.all(p.R.values == 5.0)
    assert p.G[0, 0] == -1.0
    for name in ("Q", "N1", "N2"):
        assert np.all(getattr(p, name).values == -1.0)
    assert p.terminal is None


def test_example_rejects_other_horizon():
    with pytest.raises(ValueError, match="horizon"):
        example_problem_1(TimeGrid(2.0, 100))


def test_nan_coefficient_fails_finiteness():
    g = TimeGrid(1.0, 10)
    a = np.zeros((11, 1, 1))
    a[0] = np.nan
    rep = validate_problem(build_problem(g, A=a, B=[[1.0]], R=[[1.0]]))
    bad = {c.name for c in rep.failures}
    assert "finite:A" in bad
    assert "t=0" in next(c.detail for c in rep.failures if c.name == "finite:A")


def test_asymmetric_weight_fails_symmetry_check():
    g = TimeGrid(1.0, 4)
    p = build_problem(g, A=[[0.0, 0.0], [0.0, 0.0]], B=[[1.0], [0.0]], R=[[1.0]])
    bad = np.broadcast_to(np.array([[1.0, 0.3], [0.0, 1.0]]), (5, 2, 2)).copy()
    object.__setattr__(p.weights, "N1", MatrixPath(g, bad))
    rep = validate_problem(p)
    assert "symmetry:N1" in {c.name for c in rep.failures}


def test_asymmetry_is_symmetrized_on_ingest_with_warning():
    g = TimeGrid(1.0, 4)
    with pytest.warns(UserWarning, match="asymmetric"):
        p = build_problem(g, A=[[0.0, 0.0], [0.0, 0.0]], B=[[1.0], [0.0]], R=[[1.0]],
                          Q=[[1.0, 0.2], [0.0, 1.0]])
    assert np.allclose(p.Q[0], [[1.0, 0.1], [0.1, 1.0]])
    assert validate_problem(p).passed


def test_tiny_asymmetry_is_silent():
    g = TimeGrid(1.0, 4)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        build_problem(g, A=[[0.0, 0.0], [0.0, 0.0]], B=[[1.0], [0.0]], R=[[1.0]], Q=[[1.0, 1e-14], [0.0, 1.0]])


def test_constant_identity_gives_copies():
    p = sample_coefficient(np.eye(2), TimeGrid(1.0, 4))
    assert p.values.shape == (5, 2, 2)
    assert all(np.array_equal(v, np.eye(2)) for v in p.values)


def test_piecewise_constant_left_endpoint():
    m1, m2 = [[1.0]], [[2.0]]
    p = sample_coefficient([(0.0, m1), (0.5, m2)], TimeGrid(1.0, 4))
    assert p.values[:, 0, 0].tolist() == [1.0, 1.0, 2.0, 2.0, 2.0]
    # cell values follow the left endpoint too
    assert p.at_time(0.49)[0, 0] == 1.0 and p.at_time(0.5)[0, 0] == 2.0


def test_piecewise_breakpoints_must_increase():
    with pytest.raises(ValueError):
        sample_coefficient([(0.0, [[1.0]]), (0.0, [[2.0]])], TimeGrid(1.0, 4))
    with pytest.raises(ValueError):
        sample_coefficient([(0.2, [[1.0]])], TimeGrid(1.0, 4))


def test_node_sampled_mismatch():
    with pytest.raises(ValueError, match="nodes"):
        sample_coefficient(np.zeros((3, 1, 1)), TimeGrid(1.0, 4))


def test_matrix_path_on_other_grid_rejected():
    with pytest.raises(ValueError):
        sample_coefficient(MatrixPath.zeros(TimeGrid(1.0, 3), (1, 1)), TimeGrid(1.0, 4))


def test_dimensions_positive():
    with pytest.raises(ValueError):
        Dimensions(0, 1)


def test_shape_mismatch_detected():
    g = TimeGrid(1.0, 4)
    p = build_problem(g, A=np.zeros((2, 2)), B=np.zeros((2, 1)), R=[[1.0]], C1=np.zeros((3, 3)))
    assert "shape:C1" in {c.name for c in validate_problem(p).failures}


def test_terminal_conditions():
    W1 = np.array([[0.0, 0.3], [0.0, -1.0]])
    W2 = np.array([[0.0, 2.0], [0.0, 0.5]])
    d = Deterministic([1.5])
    assert np.array_equal(d.sample(W1, W2), [[1.5], [1.5]])
    a = AffineInTerminalBM([1.0], [2.0], [3.0])
    assert np.allclose(a.sample(W1, W2)[:, 0], [1 + 0.6 + 6, 1 - 2 + 1.5])
    assert np.allclose(a.second_moment(2.0), [[1 + 2 * 4 + 2 * 9]])
    s = SampledFunctional(lambda w1, w2: w2[:, -1] ** 2, 1, "W2^2")
    assert np.allclose(s.sample(W1, W2)[:, 0], [4.0, 0.25])
    bad = SampledFunctional(lambda w1, w2: np.full(w1.shape[0], np.inf), 1)
    with pytest.raises(ValueError):
        bad.sample(W1, W2)


def test_problem_hash_sensitive_to_data():
    g = TimeGrid(1.0, 10)
    p = example_problem_1(g)
    q = p.with_terminal(Deterministic([1.0]))
    assert problem_hash(p) != problem_hash(q)
    assert problem_hash(p) == problem_hash(example_problem_1(g))


def test_regrid_resamples_specs():
    p = example_problem_1(TimeGrid(1.0, 10)).regrid(40)
    assert p.grid.steps == 40 and p.R.values.shape == (41, 1, 1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=4, unique=True), st.integers(1, 30))
def test_piecewise_sampling_matches_lookup(breaks, N):
    times = [0.0] + sorted(breaks)
    spec = [(t, [[float(i)]]) for i, t in enumerate(times)]
    g = TimeGrid(1.0, N)
    p = sample_coefficient(spec, g)
    for k, t in enumerate(g.nodes):
        expected = max(i for i, b in enumerate(times) if b <= t + 1e-12)
        assert p.values[k, 0, 0] == expected
