import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def shifted_pairs(tmp_path_factory):
    """A small copy of the shifted-pair fixture (40 samples)."""
    from refbridge.degradation import shifted_pair_dataset

    return shifted_pair_dataset(tmp_path_factory.mktemp("pairs"), n=40, seed=5)
