import pytest

from sitfuse.gridworld import EnvBundle, GenParams, generate_environment
from sitfuse.percept import BankConfig, register_default_bank


@pytest.fixture(scope="session")
def small_suite():
    """Four environments, enough for unit-level evaluation tests."""
    params = GenParams()
    return [EnvBundle.create(f"unit_{i:03d}", generate_environment(100 + i, params))
            for i in range(4)]


@pytest.fixture(scope="session")
def bank_and_cfg():
    cfg = BankConfig()
    return register_default_bank(cfg), cfg
