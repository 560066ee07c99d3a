import pytest
from hypothesis import HealthCheck, settings

from securenvm.config import SimConfig
from securenvm.controller import PersistPolicy

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MB = 1 << 20


def policy(text):
    return PersistPolicy.parse(text)


@pytest.fixture
def small_cfg():
    """1MB memory, 256 counter blocks, tiny caches so evictions happen."""
    return SimConfig(capacity=MB, persistent_eighths=4, policy=policy("triad:1"),
                     counter_cache_bytes=1024, mt_cache_bytes=1024, ways=2, wpq_depth=4)


@pytest.fixture
def desk_cfg():
    return SimConfig(policy=policy("triad:1"))


# acceptance results, filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, title = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}")
