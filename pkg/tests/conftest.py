import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from berrymass.synth import FruitShapeParams, ScenePose  # noqa: E402


@pytest.fixture
def canonical():
    return FruitShapeParams(0.04, 0.015, 1.0)


@pytest.fixture
def upright():
    return ScenePose(0.0, (0.0, 0.0, 0.5))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
