import numpy as np
import pytest

from apn.model import build_model, toy_spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="module")
def toy_csca():
    return build_model(toy_spec("csca"), seed=0)


@pytest.fixture(scope="module")
def toy_fpn():
    return build_model(toy_spec("none"), seed=0)
