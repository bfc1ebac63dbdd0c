import numpy as np
import pytest

from timestep_lab.predictor import init_predictor
from timestep_lab.schedules import build_schedule


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def linear1000():
    return build_schedule("linear", 1000, 1e-4, 0.02)


@pytest.fixture
def small_net(rng):
    """A tiny predictor (dim 2, T 10) for gradient and identity checks."""
    return init_predictor(2, 10, rng, hidden_dims=(8, 8), time_embed_dim=4)


def perfect_linear_predictor(s, t, dim=2, d_emb=4):
    """A single linear layer that recovers eps exactly at timestep ``t`` when x0 = 0."""
    theta = init_predictor(dim, s.T, np.random.default_rng(0), hidden_dims=(), time_embed_dim=d_emb)
    W, b = theta.layers[0]
    W[:] = 0.0
    b[:] = 0.0
    W[:dim, :dim] = np.eye(dim) / np.sqrt(1.0 - s.alpha_bar[t - 1])
    return theta


ACCEPTANCE_LINES = {}


def report_criterion(number, passed, detail):
    """Register the outcome of one acceptance criterion for the end-of-run summary."""
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
