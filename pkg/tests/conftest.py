from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dhlab.env import EnvironmentSpec, generate_environment
from dhlab.grid import assemble_form

settings.register_profile("dhlab", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dhlab")


def make(model="constant", N=16, seed=1, **kw):
    sample = generate_environment(EnvironmentSpec(N=N, model=model, seed=seed, **kw))
    return sample, assemble_form(sample)


@pytest.fixture(scope="session")
def pareto16():
    return make("iid-cell-pareto", 16)


@pytest.fixture(scope="session")
def lognormal16():
    return make("lognormal", 16)


@pytest.fixture(scope="session")
def constant16():
    return make("constant", 16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
