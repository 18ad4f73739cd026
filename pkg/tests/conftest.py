import pytest
from hypothesis import HealthCheck, settings

from fewha.config import load_preset
from fewha.reconstructor import Reconstructor

settings.register_profile("fewha", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fewha")


@pytest.fixture(scope="session")
def mini():
    return load_preset("mini")


@pytest.fixture(scope="session")
def maory():
    return load_preset("maory")


@pytest.fixture(scope="session")
def mini_rec(mini):
    with Reconstructor(mini) as rec:
        yield rec


@pytest.fixture(scope="session")
def maory_rec(maory):
    with Reconstructor(maory) as rec:
        yield rec



def pytest_terminal_summary(terminalreporter):
    """Print one PASS/FAIL line per acceptance criterion."""
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
