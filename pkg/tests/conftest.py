import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.register_profile("thorough", deadline=None, max_examples=600)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synthetic():
    """A reduced synthetic dataset that trains in about a second."""
    from pyrquant.dataio import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(num_classes=6, num_meta=2, samples_per_class=20,
                         stage2=(8, 8, 16), stage3=(4, 4, 32), stage4=(2, 2, 48),
                         query_per_class=4, seed=3)
    return generate_synthetic(spec)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record a one-line PASS/FAIL for an acceptance criterion and assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"acceptance {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
