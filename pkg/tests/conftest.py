import pytest

from afa import tensor as T


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.clear_tape()
    yield
    T.clear_tape()
