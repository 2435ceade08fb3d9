import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", deadline=None, max_examples=int(os.environ.get("HYPOTHESIS_EXAMPLES", 100)),
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])


@pytest.fixture(scope="session")
def books():
    from multirag.evalbench import load_dataset
    return load_dataset("books")


@pytest.fixture(scope="session")
def flights():
    from multirag.evalbench import load_dataset
    return load_dataset("flights")


@pytest.fixture(scope="session")
def books_engine(books):
    return books.engine()


@pytest.fixture(scope="session")
def flights_engine(flights):
    return flights.engine()
