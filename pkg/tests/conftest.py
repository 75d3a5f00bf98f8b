import numpy as np
import pytest
import torch

from hairlatent.backends import make_toy_backend

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def toy():
    return make_toy_backend()


@pytest.fixture(scope="session")
def toy_images(toy):
    g = toy.generator
    with torch.no_grad():
        return {s: g.synthesize(g.sample_latent(s)) for s in (0, 1, 4, 7)}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def identity_extractor(x):
    return [x]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
