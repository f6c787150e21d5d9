import numpy as np
import pytest
from hypothesis import settings

from slvba.pipeline import window_preintegrations
from slvba.simulation import SceneSpec, SimulationConfig, simulate

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def noiseless_config(seed=0, **kw):
    return SimulationConfig(imu_noise=False, pixel_sigma=0.0,
                            scene=SceneSpec(n_landmarks=50, min_views=10), seed=seed, **kw)


@pytest.fixture(scope="session")
def noiseless_bundle():
    return simulate(noiseless_config())


@pytest.fixture(scope="session")
def noisy_bundle():
    return simulate(SimulationConfig(scene=SceneSpec(n_landmarks=50, min_views=10), seed=3))


def preints_for(bundle, states):
    return window_preintegrations(bundle, states, 0, len(states))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
