import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))  # `oracle`, `testdata` imports

import pytest

from testdata import FIXTURES, GOLDEN


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN
