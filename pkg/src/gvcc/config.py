"""Codec hyperparameters."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

MODES = ("T2V", "I2V", "FLF2V")


class ConfigError(ValueError):
    pass


def _is_pow2(k: int) -> bool:
    return k >= 1 and k & (k - 1) == 0


@dataclass(frozen=True)
class CodecConfig:
    mode: str = "T2V"
    M: int = 64
    M_tail: int = 128
    K: int = 16384
    T: int = 20
    N: int = 3
    g_scale: float = 3.0
    gop_frames: int = 33
    F_tail: int = 1
    overlap: int = 0
    rho: float = 1.0
    seed: int = 42
    # latent frame geometry; F follows from gop_frames
    C: int = 4
    H: int = 8
    W: int = 8
    # pixel geometry used only for rate accounting
    H_px: int = 720
    W_px: int = 1280
    tail_correction: bool = True
    anchor_bits: int = 8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gop_frames < 1 or self.gop_frames % 4 != 1:
            raise ConfigError(f"gop_frames must be 4k+1, got {self.gop_frames}")
        if not _is_pow2(self.K) or self.K < 2:
            raise ConfigError(f"K must be a power of two >= 2, got {self.K}")
        if not 1 <= self.M <= self.K:
            raise ConfigError(f"need 1 <= M <= K, got M={self.M}, K={self.K}")
        if not 1 <= self.M_tail <= self.K:
            raise ConfigError(f"need 1 <= M_tail <= K, got M_tail={self.M_tail}, K={self.K}")
        if not 0 <= self.N < self.T:
            raise ConfigError(f"need 0 <= N < T, got T={self.T}, N={self.N}")
        if not 0 <= self.F_tail <= self.F:
            raise ConfigError(f"F_tail must lie in [0, F={self.F}]")
        if not 0 <= self.overlap < self.F:
            raise ConfigError(f"overlap must be smaller than the GOP's {self.F} latent frames")
        if not self.g_scale >= 0:
            raise ConfigError("g_scale must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if not 1 <= self.anchor_bits <= 16:
            raise ConfigError("anchor_bits must lie in [1, 16]")
        for name in ("T", "N", "M", "M_tail", "F_tail", "overlap"):
            if getattr(self, name) >= 2**16:
                raise ConfigError(f"{name} must fit in 16 bits")
        if min(self.C, self.H, self.W, self.H_px, self.W_px) < 1:
            raise ConfigError("latent and pixel dims must be positive")
        # the stream stores g_scale as float32; both sides use that value
        object.__setattr__(self, "g_scale", float(np.float32(self.g_scale)))

    @property
    def F(self) -> int:
        return (self.gop_frames - 1) // 4 + 1

    @property
    def F_px(self) -> int:
        return self.gop_frames

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.F, self.C, self.H, self.W)

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.C, self.H, self.W)

    @property
    def frame_dim(self) -> int:
        return self.C * self.H * self.W

    @property
    def latent_dim(self) -> int:
        return self.F * self.frame_dim

    @property
    def pixels_per_gop(self) -> int:
        return self.F_px * self.H_px * self.W_px

    @property
    def index_bits(self) -> int:
        return self.K.bit_length() - 1

    @property
    def atom_bits(self) -> int:
        """Bits per transmitted atom: index plus sign."""
        return self.index_bits + 1

    def atoms_per_frame(self) -> list[int]:
        counts = [self.M] * self.F
        if self.mode == "I2V":
            for f in range(self.F - self.F_tail, self.F):
                counts[f] = self.M_tail
        return counts

    def codebook_bits(self) -> int:
        """(T - N) * sum over frames of atoms * (log2 K + 1)."""
        return (self.T - self.N) * sum(self.atoms_per_frame()) * self.atom_bits

    def replace(self, **changes) -> "CodecConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict) -> "CodecConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(types[key], raw)
        return cls(**kw)


def _coerce(typ, raw):
    if not isinstance(raw, str):
        return raw
    if typ in ("int", int):
        return int(raw, 0)
    if typ in ("float", float):
        return float(raw)
    if typ in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    return raw.strip()


def parse_kv(text: str) -> dict:
    """key=value lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
