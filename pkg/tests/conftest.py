import sys
from pathlib import Path

import pytest

from fsdetr import ndgrad

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def finite_checks():
    """Run every test with ndgrad's debug finiteness assertions enabled."""
    ndgrad.CHECK_FINITE = True
    yield
    ndgrad.CHECK_FINITE = False
