import numpy as np
import pytest

from loopate.core import Experiment


@pytest.fixture
def five_unit():
    """Five units, two treated, p = 1/2, no covariates."""
    return Experiment(np.array([3.0, 5, 1, 2, 3]), np.array([1, 1, 0, 0, 0]), np.zeros((5, 0)), 0.5)


def random_experiment(rng, n_units, p=0.5, q=0, min_arm=2, **kw):
    """Random experiment with at least ``min_arm`` units in each arm."""
    while True:
        t = (rng.random(n_units) < p).astype(np.int8)
        if min_arm <= t.sum() <= n_units - min_arm:
            break
    z = rng.standard_normal((n_units, q))
    y = rng.standard_normal(n_units) + t + (z.sum(axis=1) if q else 0)
    return Experiment(y, t, z, p, **kw)
