"""Shared fixtures and independent oracle helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from spex import RngState, make_kernel


@pytest.fixture(scope="session")
def legendre_r6():
    return make_kernel("legendre", 1, 6, 0.3)


@pytest.fixture(scope="session")
def legendre_r2():
    return make_kernel("legendre", 1, 2, 0.3)


@pytest.fixture(scope="session")
def fourier_r6():
    return make_kernel("fourier", 2, 6, 0.3)


def rng(seed: int = 0) -> RngState:
    return RngState(seed)


def assert_close_3se(sample: np.ndarray, target: float, label: str = "") -> None:
    """Mean of i.i.d. draws equals target within three standard errors."""
    sample = np.asarray(sample, dtype=np.float64)
    se = sample.std(ddof=1) / np.sqrt(sample.size)
    err = abs(float(sample.mean()) - target)
    assert err <= 3.0 * se + 1e-12, (
        f"{label}: |{sample.mean():.6g} - {target:.6g}| = {err:.3g} > 3 SE = {3 * se:.3g}"
    )


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
