"""Distortion metrics on latent videos (the toy 'VAE' is the identity)."""
from __future__ import annotations

import math

import numpy as np


def mse(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def data_range(x) -> float:
    x = np.asarray(x, float)
    return float(x.max() - x.min())


def psnr(a, b, peak: float | None = None) -> float:
    """10 log10(peak^2 / MSE); peak defaults to the range of the reference ``b``."""
    err = mse(a, b)
    peak = data_range(b) if peak is None else float(peak)
    if peak <= 0:
        raise ValueError("PSNR peak must be positive")
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def frame_mse(a, b) -> np.ndarray:
    d = np.asarray(a, float) - np.asarray(b, float)
    return np.mean(d.reshape(d.shape[0], -1) ** 2, axis=1)


def frame_mae(a, b) -> np.ndarray:
    d = np.asarray(a, float) - np.asarray(b, float)
    return np.mean(np.abs(d.reshape(d.shape[0], -1)), axis=1)


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))
