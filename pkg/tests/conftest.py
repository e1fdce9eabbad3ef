import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from txgraphcl.synthgen import GeneratorSpec, generate_dataset
from txgraphcl.txdata import TransactionRecord

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def tx(tx_id, t, s, r, amount):
    return TransactionRecord(tx_id, t, s, r, amount)


@pytest.fixture(scope="session")
def small_dataset():
    """Two accounts per class of every default class, camouflage included."""
    spec = GeneratorSpec({"Phishing": 2, "Gambling": 2, "PonziScheme": 2, "MoneyLaundering": 2,
                          "CriminalBlacklist": 2, "DarknetTransaction": 2, "Normal": 4}, seed=3)
    return generate_dataset(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, echoed after the run.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
