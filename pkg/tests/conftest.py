import pytest

from bimshare.schema import bundled_schema


@pytest.fixture(scope="session")
def schema():
    return bundled_schema()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running checks")
