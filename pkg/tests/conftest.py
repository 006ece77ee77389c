import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from udaseg.phantom import PhantomSpec, build_dataset

    out = tmp_path_factory.mktemp("data")
    return build_dataset(PhantomSpec(grid_shape=(4, 32, 32), seed=0), 3, 3, 2, seed=5, out_dir=out)
