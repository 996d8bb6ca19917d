import pytest
from hypothesis import HealthCheck, settings

from fastbft.primitives import make_provider
from helpers import make_group

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(params=["fast", "real"])
def provider(request):
    return make_provider(request.param)


@pytest.fixture
def fast():
    return make_provider("fast")


@pytest.fixture
def group5():
    return make_group(5)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
