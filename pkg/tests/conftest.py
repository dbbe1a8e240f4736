import numpy as np
import pytest
import torch

from fewseg.config import synthetic_desk_config
from fewseg.data import build_dataset, make_folds

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def desk_cfg():
    return synthetic_desk_config(synthetic_images=60, out_dir="/tmp/fewseg-tests")


@pytest.fixture(scope="session")
def desk_dataset(desk_cfg):
    return build_dataset(desk_cfg)


@pytest.fixture(scope="session")
def synthetic_fold():
    return make_folds("synthetic", 0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
