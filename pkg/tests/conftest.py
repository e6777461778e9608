import numpy as np
import pytest

from pbvote import nets


def central_diff(f, z, h=1e-5):
    """Central finite differences, the reference for every gradient test."""
    z = np.asarray(z, dtype=np.float64)
    g = np.zeros_like(z)
    for i in range(z.size):
        zp = z.copy()
        zp[i] += h
        zm = z.copy()
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2.0 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), floor))


@pytest.fixture
def tiny_mlp():
    return nets.mlp(4, (6, 3))


@pytest.fixture
def tiny_conv():
    return nets.NetworkSpec(
        (nets.Conv2d(1, 2, 3), nets.MaxPool2x2(),
         nets.Dense(2 * 2 * 2, 4), nets.Dense(4, 1)),
        (1, 6, 6))
