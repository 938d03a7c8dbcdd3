"""Pinned splitmix64 stream and Box-Muller Gaussians.

Both sides of the codec must draw the same atoms, so the generator is
spelled out here rather than borrowed from numpy.random.
"""
from __future__ import annotations

import math

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
STEP_SALT = 0x47564343  # "GVCC"
MASK64 = (1 << 64) - 1

_CHUNK = 1 << 16
_M1 = np.uint64(MIX1)
_M2 = np.uint64(MIX2)


def finalize(z: int) -> int:
    """splitmix64 avalanche finalizer on a Python int."""
    z &= MASK64
    z ^= z >> 30
    z = (z * MIX1) & MASK64
    z ^= z >> 27
    z = (z * MIX2) & MASK64
    z ^= z >> 31
    return z


def initial_state(seed: int, gop_index: int, step_index: int) -> int:
    return finalize(
        finalize(seed) ^ finalize(gop_index + 1) ^ finalize(STEP_SALT + step_index)
    )


def _mix(z: np.ndarray) -> np.ndarray:
    # in place; small chunks keep the temporaries in cache
    t = np.empty_like(z)
    np.right_shift(z, np.uint64(30), out=t)
    z ^= t
    z *= _M1
    np.right_shift(z, np.uint64(27), out=t)
    z ^= t
    z *= _M2
    np.right_shift(z, np.uint64(31), out=t)
    z ^= t
    return z


class SplitMix64:
    """Counter-addressed splitmix64: output i is finalize(state + i*GAMMA)."""

    def __init__(self, state: int):
        self.state = state & MASK64
        self.position = 0  # outputs consumed so far

    def peek(self, n: int) -> np.ndarray:
        z = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        z *= np.uint64(GAMMA)
        z += np.uint64(self.state)
        return _mix(z)

    def next_u64(self, n: int) -> np.ndarray:
        out = self.peek(n)
        self.position += n
        return out

    def next_int(self) -> int:
        self.position += 1
        return finalize(self.state + self.position * GAMMA)


def to_unit(raw: np.ndarray) -> np.ndarray:
    """53-bit uniforms in [0, 1)."""
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53


class GaussianStream:
    """Standard normals from a SplitMix64 via Box-Muller pairs.

    Each pair consumes u1 then u2; a pair whose u1 is exactly zero has its
    u1 discarded and the next output becomes the new u1.  Draws are
    chunk-invariant: ``normal(a)`` followed by ``normal(b)`` equals
    ``normal(a + b)``.
    """

    def __init__(self, seed: int, gop_index: int = 0, step_index: int = 0):
        self.rng = SplitMix64(initial_state(seed, gop_index, step_index))
        self._spare: float | None = None

    def _pairs(self, npairs: int) -> tuple[np.ndarray, np.ndarray]:
        z0s, z1s = [], []
        while npairs > 0:
            u = to_unit(self.rng.peek(2 * npairs))
            u1, u2 = u[0::2], u[1::2]
            bad = np.flatnonzero(u1 == 0.0)
            take = npairs if bad.size == 0 else int(bad[0])
            r = np.sqrt(-2.0 * np.log(u1[:take]))
            theta = (2.0 * math.pi) * u2[:take]
            z0s.append(r * np.cos(theta))
            z1s.append(r * np.sin(theta))
            self.rng.position += 2 * take + (0 if bad.size == 0 else 1)
            npairs -= take
        return np.concatenate(z0s), np.concatenate(z1s)

    def normal(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        pos = 0
        if n and self._spare is not None:
            out[0] = self._spare
            self._spare = None
            pos = 1
        while pos < n:
            want = min(n - pos, _CHUNK)
            npairs = (want + 1) // 2
            z0, z1 = self._pairs(npairs)
            inter = np.empty(2 * npairs)
            inter[0::2] = z0
            inter[1::2] = z1
            out[pos:pos + want] = inter[:want]
            if want % 2:
                self._spare = float(inter[-1])
            pos += want
        return out
