"""Pytest configuration and shared fixtures."""

import os

import numpy as np
import pytest

# Set test environment
os.environ["PRERANKCAL_ENVIRONMENT"] = "testing"
os.environ.setdefault("PRERANKCAL_THREADS", "2")

from src.calibration.distributions import MixtureParams  # noqa: E402
from src.calibration.data import split, synth  # noqa: E402
from src.shared.config import get_settings  # noqa: E402
from src.shared.validation.schemas import NetworkConfig, SplitSpec  # noqa: E402


@pytest.fixture
def settings():
    """Get test settings with a fresh cache."""
    get_settings.cache_clear()
    yield get_settings()
    get_settings.cache_clear()


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def standard_normal_2d():
    """Single-component standard normal in two dimensions."""
    return MixtureParams(np.ones(1), np.zeros((1, 2)), np.eye(2)[None])


@pytest.fixture
def two_component_mixture():
    """A K=2, D=2 mixture with correlated components."""
    weights = np.array([0.3, 0.7])
    means = np.array([[-1.0, 0.5], [1.5, -0.5]])
    chol = np.array([[[1.0, 0.0], [0.4, 0.8]], [[0.6, 0.0], [-0.2, 1.2]]])
    return MixtureParams(weights, means, chol)


@pytest.fixture
def tiny_network():
    """K=2, D=2, one hidden layer of 8 units."""
    return NetworkConfig(input_dim=2, output_dim=2, components=2, hidden_widths=[8])


@pytest.fixture
def linear_splits():
    """Standardized splits of a small linear-Gaussian sample."""
    return split(synth("linear_gaussian", 200, seed=3), SplitSpec(seed=0))


@pytest.fixture
def batched_mixture(rng):
    """Random batched mixture: B=6 rows, K=2, D=2."""
    B, K, D = 6, 2, 2
    logits = rng.normal(size=(B, K))
    weights = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    means = rng.normal(size=(B, K, D))
    chol = np.tril(rng.normal(scale=0.3, size=(B, K, D, D)), k=-1)
    chol[..., np.arange(D), np.arange(D)] = rng.uniform(0.5, 1.5, size=(B, K, D))
    return MixtureParams(weights, means, chol)
