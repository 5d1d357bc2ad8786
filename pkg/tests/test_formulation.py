import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mapcluster import (
    Assignment,
    CannotLink,
    Dataset,
    GaussianRidge,
    MinSize,
    MustLink,
    OrderPi,
    Params,
    ProblemSpec,
    build_miqp,
    evaluate_objective,
    pwl_chords,
    true_bound_correction,
)
from mapcluster.formulation import dump_model, load_model_dump


def test_midpoint_chord_value():
    ch = pwl_chords(0.5, 1)
    assert ch(0.75) == pytest.approx(0.346574, abs=1e-6)
    assert -np.log(0.75) == pytest.approx(0.287682, abs=1e-6)


def test_e_max_single_cell_closed_form():
    ch = pwl_chords(0.5, 1)
    grid = np.linspace(0.5, 1, 200_001)
    dense = np.max(ch(grid) + np.log(grid))
    assert ch.e_max == pytest.approx(dense, abs=1e-9)
    assert ch.e_max == pytest.approx(0.059660, abs=1e-6)
    assert ch.e_max <= 0.125


# frozen from the closed-form per-cell maximizer
E_MAX_1E3 = {8: 2.2901, 16: 1.7775, 32: 1.3074, 64: 0.8947}


@pytest.mark.parametrize("B", [8, 16, 32, 64])
def test_e_max_frozen_and_below_cap(B):
    ch = pwl_chords(1e-3, B)
    assert ch.e_max == pytest.approx(E_MAX_1E3[B], abs=1e-4)
    delta = (1 - 1e-3) / B
    assert ch.e_max <= delta**2 / (8 * 1e-3**2)


def test_chords_interpolate_breakpoints_and_are_convex():
    ch = pwl_chords(1e-3, 16)
    assert np.allclose(ch(ch.breaks), -np.log(ch.breaks), atol=1e-12)
    assert np.all(ch.slopes < 0) and np.all(np.diff(ch.slopes) > 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 0.5), st.integers(1, 128))
def test_overestimation_sandwich(pi_min, B):
    ch = pwl_chords(pi_min, B)
    grid = np.linspace(pi_min, 1, 5001)
    gap = ch(grid) + np.log(grid)
    assert gap.min() >= -1e-10
    assert gap.max() <= ch.e_max + 1e-10


def test_refinement_in_asymptotic_regime():
    # the factor-three contraction only kicks in once cells are small relative to pi_min
    prev = pwl_chords(0.5, 2).e_max
    for B in (4, 8, 16, 32):
        cur = pwl_chords(0.5, B).e_max
        assert cur <= prev / 3
        prev = cur


def test_true_bound_correction():
    assert true_bound_correction(10.0, 20, 0.01) == pytest.approx(9.8)
    assert true_bound_correction(3.5, 7, 0.0) == 3.5


def test_column_and_row_counts_n2_k2():
    data = Dataset(np.array([[-1.0], [1.0]]))
    spec = ProblemSpec.from_data(data, 2, 0.5, breakpoints=4)
    m = build_miqp(data, spec)
    counts = {kind: m.row_kind.count(kind) for kind in set(m.row_kind)}
    assert counts == {"rowsum": 2, "simplex": 1, "product": 16, "chord": 8, "w": 8}
    # 4 z, 2 mu, 4 t, 2 pi, 2 u, 4 w
    assert m.ncols == 18
    assert m.integrality.sum() == 4 and np.all(m.integrality[m.z_idx.ravel()])


def test_q_is_psd():
    rng = np.random.default_rng(1)
    P = np.array([[1.5, 0.4], [0.4, 0.7]])
    data = Dataset(rng.normal(size=(5, 2)))
    spec = ProblemSpec.from_data(data, 3, P, prior=GaussianRidge(0.3))
    m = build_miqp(data, spec)
    assert np.linalg.eigvalsh(m.Q.toarray()).min() > -1e-9


@pytest.mark.parametrize("P", [0.7, np.array([[1.5, 0.4], [0.4, 0.7]])], ids=["scalar", "matrix"])
def test_model_objective_equals_true_plus_chord_error(P):
    rng = np.random.default_rng(2)
    d = 1 if np.ndim(P) == 0 else 2
    data = Dataset(rng.normal(size=(6, d)))
    spec = ProblemSpec.from_data(data, 3, P, breakpoints=16, prior=GaussianRidge(0.2))
    m = build_miqp(data, spec)
    for _ in range(20):
        a = Assignment.from_labels(rng.integers(0, 3, 6), 3)
        mu = rng.uniform(spec.mu_lower, spec.mu_upper)
        pi = spec.pi_floor + (1 - 3 * spec.pi_floor) * rng.dirichlet(np.ones(3))
        x = m.point_for(a.z, mu, pi)
        assert m.max_violation(x) <= 1e-9
        true = evaluate_objective(data, spec, a, Params(mu, pi))
        chord_err = m.chords(pi) + np.log(pi)
        assert m.objective(x) == pytest.approx(true + a.counts @ chord_err, abs=1e-9)


def test_side_rows_compiled_and_conflicts_recorded():
    data = Dataset(np.arange(4.0)[:, None])
    spec = ProblemSpec.from_data(data, 2, 1.0, breakpoints=4)
    m = build_miqp(data, spec, [MinSize(0, 1), OrderPi()])
    assert m.row_kind.count("side") == 2
    bad = build_miqp(data, spec, [MustLink(0, 1), CannotLink(0, 1)])
    assert not bad.validation.ok and bad.row_kind.count("side") == 0


def test_dump_round_trip(tmp_path):
    data = Dataset(np.array([[-1.0], [0.5], [2.0]]))
    spec = ProblemSpec.from_data(data, 2, 0.8, breakpoints=4)
    m = build_miqp(data, spec, [MinSize(1, 1)])
    path = tmp_path / "m.txt"
    dump_model(m, path)
    back = load_model_dump(path)
    assert np.array_equal(back["lo"], m.lo) and np.array_equal(back["hi"], m.hi)
    assert np.array_equal(back["integrality"], m.integrality)
    assert abs(back["Q"] - m.Q).max() == 0
    assert abs(back["A"] - sp.csr_matrix(m.A)).max() == 0
    assert np.array_equal(back["c"], m.c) and back["c0"] == m.c0
    assert back["names"][m.z_idx[0, 0]] == "z_1_1"
