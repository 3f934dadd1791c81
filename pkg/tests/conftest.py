import numpy as np
import pytest

from helpers import tiny_encoder, tiny_experiment


@pytest.fixture
def tiny_cfg():
    return tiny_encoder()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_exp():
    return tiny_experiment()
