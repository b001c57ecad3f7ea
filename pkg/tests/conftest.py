"""Shared test helpers: finite-difference gradient oracle and rng plumbing."""

from __future__ import annotations

import numpy as np
import pytest


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error relative to the gradient scale (+1 floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 0.0) + 1.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def away_from_zero(rng: np.random.Generator, shape, low: float = 0.05,
                   span: float = 1.0) -> np.ndarray:
    """Random values with |x| >= low, keeping ReLU kinks away from FD probes."""
    signs = rng.choice([-1.0, 1.0], size=shape)
    return signs * (low + span * rng.random(shape))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
