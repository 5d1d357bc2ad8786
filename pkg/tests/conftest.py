import numpy as np
import pytest

from mapcluster import Dataset, MinSize, ProblemSpec


def random_instance(seed, n_range=(6, 10), Ks=(2, 3), eta_range=(0.5, 5.0), B=64):
    """1-d instance drawn like the oracle suite: n, K, eta random, MinSize 1 everywhere."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    K = int(rng.choice(Ks))
    eta = float(rng.uniform(*eta_range))
    y = rng.normal(0.0, 2.0, n)
    data = Dataset(y[:, None])
    spec = ProblemSpec.from_data(data, K, eta, breakpoints=B, pi_floor=1e-3)
    cons = [MinSize(k, 1) for k in range(K)]
    return data, spec, cons


@pytest.fixture
def two_points():
    data = Dataset(np.array([[-1.0], [1.0]]))
    spec = ProblemSpec.from_data(data, 2, 0.5, breakpoints=64)
    return data, spec, [MinSize(0, 1), MinSize(1, 1)]
