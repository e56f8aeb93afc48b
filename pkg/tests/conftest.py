import numpy as np
import pytest

from moalign.synthvid import make_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Eight desk-geometry clips shared by harness tests."""
    out = tmp_path_factory.mktemp("tiny")
    make_dataset(out, 8, seed=11)
    return out


@pytest.fixture(scope="session")
def tiny_eval_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_eval")
    make_dataset(out, 4, seed=12)
    return out
