import numpy as np
import pytest

from trajcl.data import SyntheticScenarioSpec, generate_synthetic
from trajcl.predictor import ModelConfig


@pytest.fixture(scope="session")
def small_model_config():
    """Tiny predictor so gradient-heavy tests stay fast."""
    return ModelConfig(t_h_frames=6, t_f_frames=8, n_neighbors=3,
                       enc_hidden=8, enc_dim=8, dec_hidden=12)


@pytest.fixture(scope="session")
def small_dataset(small_model_config):
    spec = SyntheticScenarioSpec(family="merge", n_vehicles=8, seed=5, duration_s=20)
    return generate_synthetic(spec, t_h=0.6, t_f=0.8, n_max=3, stride=4,
                              scenario_id=1, split_seed=5)


@pytest.fixture(scope="session")
def default_dataset():
    """Full-size windows (2 s / 4 s at 10 Hz, 5 neighbor slots)."""
    spec = SyntheticScenarioSpec(family="straight_flow", n_vehicles=9, seed=3,
                                 duration_s=30)
    return generate_synthetic(spec, stride=5, scenario_id=1, split_seed=3)


def random_bivariate_steps(rng, n):
    """Arbitrary valid bivariate Gaussian parameter arrays (mu, sigma, rho)."""
    mu = rng.normal(0, 5, (n, 2))
    sigma = np.exp(rng.normal(0, 0.8, (n, 2)))
    rho = rng.uniform(-0.95, 0.95, n)
    return mu, sigma, rho
