import numpy as np
import pytest

from popdyn.ground_truth import GroundTruth, synthesize_ground_truth


@pytest.fixture(scope="session")
def small_gt():
    return synthesize_ground_truth(40, 80, 0.5, 0.1, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_gt(rel):
    return GroundTruth(np.asarray(rel, dtype=bool))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
