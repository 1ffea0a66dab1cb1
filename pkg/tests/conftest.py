import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# criterion id -> list of (check name, ok, detail); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        title, checks = ACCEPTANCE[key]
        ok = all(c[1] for c in checks)
        detail = "; ".join(f"{name}: {d}" for name, _, d in checks)
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}. {title} | {detail}")
