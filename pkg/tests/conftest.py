"""Shared helpers: seeded generators and a directional finite-difference oracle."""

import numpy as np


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def directional_fd(f, x: np.ndarray, v: np.ndarray, h: float = 1e-6) -> float:
    """Central difference of scalar f along direction v at x."""
    return (f(x + h * v) - f(x - h * v)) / (2.0 * h)


def fd_relative_error(f, grad: np.ndarray, x: np.ndarray, v: np.ndarray,
                      h: float = 1e-6) -> float:
    """Relative disagreement between an analytic gradient and the FD oracle
    along one direction; the scale guard keeps near-zero derivatives from
    inflating the ratio."""
    analytic = float((grad * v).sum())
    numeric = directional_fd(f, x, v, h)
    scale = max(abs(analytic), abs(numeric), 1e-8)
    return abs(analytic - numeric) / scale
