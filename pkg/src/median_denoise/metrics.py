"""PSNR and MSE on the 8-bit intensity scale.

Both metrics interpret their inputs on the 0..255 scale.  Helpers that work
in normalized [0, 1] space should rescale before scoring (or equivalently
multiply a normalized-space MSE by 255**2).
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["mse", "psnr", "PSNR_INF"]

# serialized form of the zero-MSE sentinel in reports
PSNR_INF = math.inf


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference over all elements (64-bit accumulation)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(255^2 / MSE) in db; identical images give +inf."""
    m = mse(a, b)
    if m == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(255.0 ** 2 / m)
