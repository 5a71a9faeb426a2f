import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from syndss.evolver import RngStream, default_m3, load_fixture_tree, simulate_alignment

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.register_profile("ci", deadline=None, max_examples=15,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def tree_a():
    return load_fixture_tree("A")


@pytest.fixture(scope="session")
def null_aln(tree_a):
    """Five taxa, 300 codons, simulated on the bundled tree."""
    return simulate_alignment(tree_a, 300, default_m3("p1"), RngStream(20240, (1,)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number, verdict, detail in sorted(RESULTS):
            terminalreporter.write_line(f"{verdict} criterion {number}: {detail}")
