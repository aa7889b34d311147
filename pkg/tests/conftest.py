import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from protocol import run_protocol  # noqa: E402


@pytest.fixture(scope="session")
def protocol():
    """The standard synthetic experiment, trained once per session."""
    return run_protocol()
