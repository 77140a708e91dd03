import pytest

from hetfed.mlp import DEFAULT_DIMS, init_model
from hetfed.numfmt import F64


@pytest.fixture(scope="session")
def default_model():
    return init_model(DEFAULT_DIMS, F64, seed=1)
