import numpy as np
import pytest

from soundscape_hbm.gibbs import MCMCSettings, ModelSpec
from soundscape_hbm.synthetic import default_truth, simulate, synthetic_rc


def quick(spec: ModelSpec, iterations=800, burn_in=400, thin=4, n_chains=2, seed=0) -> ModelSpec:
    return spec.with_mcmc(iterations=iterations, burn_in=burn_in, thin=thin, n_chains=n_chains, seed=seed)


@pytest.fixture(scope="session")
def small_data():
    truth = default_truth(1, rc=synthetic_rc(6, seed=3))
    data, latent = simulate(truth, seed=3)
    return data, latent, truth


@pytest.fixture(scope="session")
def small_fit(small_data):
    from soundscape_hbm.two_stage import fit_two_stage

    data, _, _ = small_data
    s1 = quick(ModelSpec(1, 1), seed=1)
    s2 = quick(ModelSpec(1, 2), seed=2)
    return fit_two_stage(s1, s2, data)


@pytest.fixture(scope="session")
def small_fit_m2(small_data):
    from soundscape_hbm.two_stage import fit_two_stage

    data, _, _ = small_data
    s1 = quick(ModelSpec(2, 1), seed=5)
    s2 = quick(ModelSpec(2, 2), seed=6)
    return fit_two_stage(s1, s2, data)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
