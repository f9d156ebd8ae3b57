import numpy as np
import pytest

from mflab import _backend


@pytest.fixture
def rng():
    return np.random.default_rng(77)


@pytest.fixture
def restore_backend():
    """Hand the test a backend switcher that always restores on teardown."""
    saved = _backend.active_backend()

    def switch(name):
        _backend.set_backend(name)

    yield switch
    _backend.set_backend(saved)
