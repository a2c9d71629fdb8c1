"""Shared fixtures and deterministic hypothesis settings."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# One deterministic, time-limit-free profile for all property tests: the
# suite must behave identically on every run and machine.
settings.register_profile(
    "cubediff",
    deadline=None,
    derandomize=True,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("cubediff")


@pytest.fixture
def rng():
    """Fresh, pinned generator per test."""
    return np.random.default_rng(20260816)


def random_distribution(seed: int, d: int):
    """Dirichlet(1) draw over the cube — full support almost surely."""
    from cubediff import DenseDistribution

    gen = np.random.default_rng(seed)
    return DenseDistribution(d, gen.dirichlet(np.ones(1 << d)))


def bounded_ratio_distribution(seed: int, d: int, L: float):
    """Law with every neighbor probability ratio at most L by construction."""
    from cubediff import DenseDistribution

    gen = np.random.default_rng(seed)
    phi = gen.uniform(0.0, np.log(L), size=1 << d)
    mass = np.exp(phi)
    return DenseDistribution(d, mass / mass.sum())
