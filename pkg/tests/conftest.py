import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    from cffa.config import DataConfig, RunConfig, TrainConfig

    train = TrainConfig(pretrain_iters=12, adapt_iters=12, psa_start_iter=6, lr_decay_iter=9, seed=3)
    return RunConfig(train=train, data=DataConfig(n_source=5, n_target=4, n_test=3, seed=3))


@pytest.fixture(scope="session")
def tiny_domains(tiny_config):
    from cffa.experiment import build_domains

    return build_domains(tiny_config)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
