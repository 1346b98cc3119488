import numpy as np
import pytest
from scipy.stats import ortho_group

from statmicro.model import ModelParams


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_params(rng, n, m=None, rotate=True, uniform_a=False):
    a = np.full(n, rng.uniform(0.3, 2.5)) if uniform_a else rng.uniform(0.3, 2.5, n)
    return ModelParams(
        a=a, b=rng.uniform(0.3, 2.5, n), d=rng.uniform(0.2, 5, n), s=rng.uniform(0.2, 5, n),
        m=float(rng.uniform(1, 50)) if m is None else m,
        kinetic_accel=rng.uniform(0.1, 2, n), kinetic_vel=rng.uniform(0, 2, n),
        rotation=ortho_group.rvs(n, random_state=rng) if rotate and n > 1 else None)
