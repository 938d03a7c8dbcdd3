"""Synthetic latent videos used in place of real footage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import GaussianMixturePrior

KINDS = ("gauss_static", "gmm_blobs", "moving_blob")


@dataclass
class SyntheticSet:
    kind: str
    videos: np.ndarray  # (count, F, C, H, W)
    prior: GaussianMixturePrior | None = None


def _periodic_blob(h, w, cy, cx, width):
    yy = np.arange(h)[:, None] - cy
    xx = np.arange(w)[None, :] - cx
    # minimum-image distance on the torus
    yy = (yy + h / 2) % h - h / 2
    xx = (xx + w / 2) % w - w / 2
    return np.exp(-(yy**2 + xx**2) / (2.0 * width**2))


def moving_blob(count, dims, seed, amp_scale=1.5, bg_scale=0.5):
    """Per-channel offset plus a Gaussian bump translating one step per frame.

    Motion is an integer shift on a torus, so consecutive frames differ by
    exactly the same pattern and the frame-to-frame MAE is constant.
    """
    F, C, H, W = dims
    rng = np.random.default_rng(seed)
    out = np.empty((count, F, C, H, W))
    for i in range(count):
        bg = rng.normal(0.0, bg_scale, size=C)
        amp = rng.normal(0.0, amp_scale, size=C)
        width = rng.uniform(1.0, 2.0)
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        vy, vx = rng.integers(-1, 2, size=2)
        base = bg[:, None, None] + amp[:, None, None] * _periodic_blob(H, W, cy, cx, width)[None]
        for f in range(F):
            out[i, f] = np.roll(base, shift=(vy * f, vx * f), axis=(1, 2))
    return out


def blob_mixture_prior(dims, n_components=4, std=0.3, seed=0, amp_scale=1.5):
    """Isotropic mixture whose component means are static blob videos."""
    F, C, H, W = dims
    rng = np.random.default_rng(seed)
    means = np.empty((n_components, F, C, H, W))
    for k in range(n_components):
        amp = rng.normal(0.0, amp_scale, size=C)
        blob = _periodic_blob(H, W, rng.uniform(0, H), rng.uniform(0, W), rng.uniform(1.0, 2.0))
        means[k] = (amp[:, None, None] * blob[None])[None]
    weights = np.full(n_components, 1.0 / n_components)
    return GaussianMixturePrior(weights, means, np.full(n_components, std))


def gen_synthetic(kind: str, count: int, dims, seed: int = 0, **kw) -> SyntheticSet:
    dims = tuple(int(v) for v in dims)
    if len(dims) != 4 or min(dims) < 1:
        raise ValueError(f"dims must be four positive ints (F, C, H, W), got {dims}")
    if kind == "gauss_static":
        scale = kw.get("scale", 1.0)
        rng = np.random.default_rng(seed)
        frames = rng.normal(0.0, scale, size=(count, 1, *dims[1:]))
        videos = np.repeat(frames, dims[0], axis=1)
        return SyntheticSet(kind, videos)
    if kind == "gmm_blobs":
        prior = blob_mixture_prior(dims, kw.get("n_components", 4), kw.get("std", 0.3), seed)
        videos = prior.sample(count, np.random.default_rng(seed + 1))
        return SyntheticSet(kind, videos, prior)
    if kind == "moving_blob":
        return SyntheticSet(kind, moving_blob(count, dims, seed))
    raise ValueError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
