import pytest

from treeqn import autodiff as ad


@pytest.fixture(autouse=True)
def _reset_default_dtype():
    yield
    ad.set_default_dtype("float64")
