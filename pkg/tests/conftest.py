import numpy as np
import pytest

from bcmda.synthdata import default_domains, gen_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return gen_dataset(default_domains(), (6, 3), root, seed=3, labeled_domain=0, n_labeled=4)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end experiment")


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for num in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[num])
