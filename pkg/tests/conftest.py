import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rigidflow.geometry import Intrinsics, RigidTransform

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def intr100():
    # fx = fy = 100, principal point (50, 50)
    return Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


def random_transform(rng, angle=0.5, trans=1.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0, angle) / np.linalg.norm(w)
    return RigidTransform.from_rotvec(w, rng.uniform(-trans, trans, 3))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
