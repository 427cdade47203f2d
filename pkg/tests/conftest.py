"""Shared fixtures. Trained models are built once per session."""

from __future__ import annotations

import time
from types import SimpleNamespace

import numpy as np
import pytest

from trustsampling.datasets import DatasetSpec, generate, split_heldout
from trustsampling.denoiser import DenoiserModel, TrainConfig, train
from trustsampling.diffusion import linear_beta_schedule

# Settings used for the mixture model behind the pinned-coordinate experiments.
MIXTURE_N = 20000
MIXTURE_TRAIN = TrainConfig(epochs=200, batch_size=512, learning_rate=2e-3, seed=0, dataset_id="gaussian_mixture")
TRAJECTORY_N = 10000
TRAJECTORY_TRAIN = TrainConfig(epochs=150, batch_size=512, learning_rate=2e-3, seed=0, dataset_id="trajectory")


@pytest.fixture(scope="session")
def schedule():
    return linear_beta_schedule(1000, 1e-4, 0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def random_model():
    """Small untrained network with nonzero weights in d=3."""
    return DenoiserModel.init(3, hidden=(16, 16), time_embed_dim=8, seed=3)


class StandardNormalOracle:
    """Returns fresh standard-normal draws regardless of input."""

    def __init__(self, d, seed):
        self.dim = d
        self.rng = np.random.default_rng(seed)

    def forward(self, x, t):
        return self.rng.standard_normal(np.shape(np.atleast_2d(x)))


def _fit(kind, n, cfg, schedule):
    data = generate(DatasetSpec(kind, n, seed=0))
    tr, ho = split_heldout(data, 0.1, seed=0)
    start = time.perf_counter()
    res = train(tr, schedule, cfg)
    seconds = time.perf_counter() - start
    return SimpleNamespace(model=res.model, schedule=schedule, train=tr, heldout=ho, result=res, train_seconds=seconds)


@pytest.fixture(scope="session")
def mixture(schedule):
    return _fit("gaussian_mixture", MIXTURE_N, MIXTURE_TRAIN, schedule)


@pytest.fixture(scope="session")
def trajectory(schedule):
    return _fit("trajectory", TRAJECTORY_N, TRAJECTORY_TRAIN, schedule)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# -- acceptance report ---------------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
