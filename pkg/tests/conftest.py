import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from dimsel.synthgen import SynthConfig, generate


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    # bit-reproducibility is only promised single-threaded
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def synth():
    return generate(SynthConfig())


@pytest.fixture(scope="session")
def synth_split(synth):
    return synth.queries.subset(synth.train_ids), synth.queries.subset(synth.test_ids)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
