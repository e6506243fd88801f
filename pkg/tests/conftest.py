import numpy as np
import pytest

from paleorecon.pseudoproxy import PseudoConfig, generate


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def small_world():
    """WF world with two nests (1501-1750, 1751-2000) and five proxies each."""
    config = PseudoConfig(first_year=1501, n_nests=2, proxies_per_nest=5, snr_range=(1.0, 2.0))
    return generate(config, seed=11)


@pytest.fixture
def world_files(small_world, tmp_path):
    return small_world.write(tmp_path / "world")
