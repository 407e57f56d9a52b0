import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from steerpaint.denoiser import DenoiserConfig, DenoiserModel, load_checkpoint  # noqa: E402
from steerpaint.reference import reference_checkpoint_path  # noqa: E402
from steerpaint.schedule import build_schedule  # noqa: E402


@pytest.fixture(scope="session")
def sched():
    return build_schedule(200, 5e-4, 0.1)


@pytest.fixture(scope="session")
def fresh_model():
    """Untrained model with default shapes; enough for gradient and shape checks."""
    return DenoiserModel(DenoiserConfig(), seed=3)


@pytest.fixture(scope="session")
def ref_model():
    return load_checkpoint(reference_checkpoint_path())


_ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance(capsys):
    """Record a criterion verdict, print its line, and fail the test when it did not pass."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
