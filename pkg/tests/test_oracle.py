import numpy as np
import pytest

from mapcluster import (
    AssignLabel,
    Assignment,
    CannotLink,
    Dataset,
    MinSize,
    MustLink,
    ProblemSpec,
    brute_force,
    solution_for,
)
from mapcluster.constraints import all_satisfied
from mapcluster.oracle import OracleSizeError, all_labelings

from conftest import random_instance


def test_two_point_optimum(two_points):
    data, spec, cons = two_points
    sol = brute_force(data, spec, cons)
    assert sol.objective == pytest.approx(1.386294, abs=1e-6)
    assert list(sol.labels) == [0, 1]  # lexicographically smallest of the two ties


def test_single_point():
    data = Dataset(np.array([[2.5]]))
    sol = brute_force(data, ProblemSpec.from_data(data, 1, 1.0, pi_floor=1.0))
    assert sol.objective == 0.0 and sol.params.mu[0, 0] == 2.5 and sol.params.pi[0] == 1.0


def test_close_pair_merges():
    data = Dataset(np.array([[0.0], [0.1]]))
    sol = brute_force(data, ProblemSpec.from_data(data, 2, 0.5, pi_floor=1e-3))
    assert len(set(sol.labels)) == 1
    assert sol.objective == pytest.approx(0.5 * 0.005 - 2 * np.log(0.999), abs=1e-12)


def test_enumeration_order():
    labs = np.vstack(list(all_labelings(2, 3, chunk=4)))
    assert labs.tolist() == [[a, b] for a in range(3) for b in range(3)]


def test_guard():
    data = Dataset(np.zeros((21, 1)))
    with pytest.raises(OracleSizeError):
        brute_force(data, ProblemSpec.from_data(data, 2, 1.0))


def test_infeasible_returns_none():
    data = Dataset(np.arange(3.0)[:, None])
    spec = ProblemSpec.from_data(data, 2, 1.0)
    assert brute_force(data, spec, [MustLink(0, 1), CannotLink(0, 1)]) is None
    assert brute_force(data, spec, [MinSize(0, 2), MinSize(1, 2)]) is None


# frozen optima for the seeded suite generator
FROZEN = {0: 14.754620, 1: 10.895731, 2: 40.829235, 3: 28.134485}


@pytest.mark.parametrize("seed", sorted(FROZEN))
def test_frozen_optima(seed):
    data, spec, cons = random_instance(seed)
    assert brute_force(data, spec, cons).objective == pytest.approx(FROZEN[seed], abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_optimum_beats_random_feasible_assignments(seed):
    data, spec, cons = random_instance(40 + seed)
    cons = cons + [CannotLink(0, 1), AssignLabel(2, 0)]
    opt = brute_force(data, spec, cons)
    assert all_satisfied(cons, opt.labels, spec.K)
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        lab = rng.integers(0, spec.K, data.n)
        if all_satisfied(cons, lab, spec.K):
            assert opt.objective <= solution_for(data, spec, Assignment.from_labels(lab, spec.K)).objective + 1e-12


def test_permutation_invariance():
    data, spec, cons = random_instance(7)
    base = brute_force(data, spec, cons).objective
    perm = np.random.default_rng(1).permutation(data.n)
    shuffled = Dataset(data.points[perm])
    assert brute_force(shuffled, spec, cons).objective == pytest.approx(base, abs=1e-10)
