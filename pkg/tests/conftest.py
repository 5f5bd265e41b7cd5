import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

import fem
from model import heat_benchmark, linear_gaussian_test
from run_config import parse_config

# small enough for quick runs, same structure as the benchmark
TINY = {
    "n_elems": 20,
    "horizon": 0.05,
    "dt": 0.01,
    "n_noise_modes": 5,
    "obs_dim": 2,
    "n_particles": 20,
    "branch_interval": 0.02,
    "n_sgd": 3,
    "learning_rate": 0.05,
    "n_cost_samples": 8,
}

# regression-locked arrays; a missing file is written on first run and the test skipped
GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


@pytest.fixture
def ops():
    return fem.assemble(10.0, 40, 0.01)


@pytest.fixture
def benchmark(ops):
    return heat_benchmark(ops, obs_dim=3, n_noise_modes=10)


@pytest.fixture
def noise_free(ops):
    return heat_benchmark(ops, obs_dim=3, n_noise_modes=10, sigma_amplitude=0.0, g_amplitude=0.0, obs_gain=0.0)


@pytest.fixture
def linear_model(ops):
    return linear_gaussian_test(ops, obs_dim=3, n_noise_modes=10)


@pytest.fixture
def tiny_config():
    def make(**overrides):
        values = dict(TINY)
        values.update(overrides)
        return parse_config(source=values)
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def golden():
    def check(name, values, rtol=1e-10):
        path = os.path.join(GOLDEN_DIR, f"{name}.npy")
        values = np.asarray(values, dtype=np.float64)
        if not os.path.exists(path):
            os.makedirs(GOLDEN_DIR, exist_ok=True)
            np.save(path, values)
            pytest.skip(f"wrote golden file {path}")
        assert_allclose(values, np.load(path), rtol=rtol, atol=1e-14)
    return check
