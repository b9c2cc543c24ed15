import time

import pytest

from scdr.config import RunConfig

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

REFERENCE_SEEDS = (0, 1, 2)

# wall-clock seconds of shared fixtures, keyed by fixture name
TIMINGS: dict[str, float] = {}


@pytest.fixture(scope="session")
def reference_soundness():
    """Two-branch vs whole-only runs on the reference configuration, shared across modules."""
    from scdr.experiment import run_soundness
    start = time.perf_counter()
    report = run_soundness(RunConfig(), REFERENCE_SEEDS)
    TIMINGS["reference_soundness"] = time.perf_counter() - start
    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
