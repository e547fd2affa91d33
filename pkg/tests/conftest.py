import numpy as np
import pytest
import torch

from framesqa.signal_io import CorpusConfig, generate_corpus


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusConfig(n_utterances=12, duration_range=(1.0, 2.0), seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
