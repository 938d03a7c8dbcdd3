"""GOP encoding/decoding in the three conditioning modes, plus rate accounting.

The encoder runs a batch of targets through one trajectory loop so the
per-step codebook is generated once and shared; everything that feeds the
state update is computed per target with exactly the operations the
decoder repeats, so decoded latents match the encoder bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bitstream import (
    HEADER_SIZE,
    TRAILER_SIZE,
    CodebookMismatchError,
    GopPayload,
    GvccStream,
    StreamHeader,
    block_bits,
    decode_frame_block,
    encode_frame_block,
    parse_stream,
    serialize_stream,
)
from .codebook import (
    _top_m,
    StepSelection,
    apply_step,
    codebook_checksum,
    codebook_innovation,
    denoise_estimate,
    frame_atoms,
    initial_noise,
    select_frames,
    step_codebook,
)
from .config import CodecConfig, ConfigError
from .fields import Conditioning, eval_field
from .flow import IntegrationError, TimeGrid

RESIDUAL_BITS = 8


class EncodeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# trajectory


@dataclass
class _Trajectory:
    finals: list
    selections: list  # [b][step][frame]
    residual_vars: list  # [b][step]
    checksum: int | None = None


def _select_batch(residuals, codebook, config) -> list[list[StepSelection]]:
    """Per-frame top-M for B residuals at once (one matmul per frame)."""
    fd = config.frame_dim
    counts = config.atoms_per_frame()
    B = len(residuals)
    out = [[None] * config.F for _ in range(B)]
    for f in range(config.F):
        R = np.stack([r[f].ravel() for r in residuals])
        scores = (frame_atoms(codebook, f, fd) @ R.T).T
        idx, signs = _top_m(scores, counts[f])
        for b in range(B):
            out[b][f] = StepSelection(idx[b], signs[b])
    return out


def _run(field, config: CodecConfig, conds, gop_index, *, targets=None, selections=None,
         want_checksum=False, expect_checksum=None) -> _Trajectory:
    B = len(conds)
    grid = TimeGrid(config.T, config.N)
    start = initial_noise(config.seed, gop_index, config.latent_shape)
    xs = [start.copy() for _ in range(B)]
    sels = [[] for _ in range(B)]
    rvars = [[] for _ in range(B)]
    checksum = None
    for k, t in grid:
        us = [eval_field(field, xs[b], t, conds[b]) for b in range(B)]
        if not grid.is_codebook_step(k):
            for b in range(B):
                xs[b] = apply_step(xs[b], t, us[b], config, None)
            continue
        cb = step_codebook(config, gop_index, k)
        if k == 0 and (want_checksum or expect_checksum is not None):
            checksum = codebook_checksum(cb)
            if expect_checksum is not None and checksum != expect_checksum:
                raise CodebookMismatchError(
                    f"local codebook checksum {checksum:#018x} != stream {expect_checksum:#018x}"
                )
        if targets is not None:
            residuals = [targets[b] - denoise_estimate(xs[b], t, us[b]) for b in range(B)]
            for b, r in enumerate(residuals):
                if not np.all(np.isfinite(r)):
                    raise EncodeError(f"non-finite residual at step {k}")
                rvars[b].append(float(np.var(r)))
            step_sels = _select_batch(residuals, cb, config) if B > 1 else [
                select_frames(residuals[0], cb, config)]
        else:
            step_sels = [selections[b][k] for b in range(B)]
        for b in range(B):
            sels[b].append(step_sels[b])
            z = codebook_innovation(step_sels[b], cb, config)
            xs[b] = apply_step(xs[b], t, us[b], config, z)
    return _Trajectory(xs, sels, rvars, checksum)


# --------------------------------------------------------------------------
# single GOPs


def _check_latent(x, config):
    if np.shape(x) != config.latent_shape:
        raise ShapeError(f"latent shape {np.shape(x)} does not match config {config.latent_shape}")


def _finish(x, cond, target, config):
    """Pin anchored frames, then apply the I2V tail correction if enabled."""
    x = cond.pin(x)
    body = None
    if config.mode == "I2V" and config.tail_correction:
        body = encode_frame_block(target[-1] - x[-1], RESIDUAL_BITS)
        x = x.copy()
        x[-1] = x[-1] + decode_frame_block(body, config.frame_shape, RESIDUAL_BITS)
    return x, body


def _payload_bits(config, residual, anchors) -> dict:
    bits = {
        "codebook": 8 * math.ceil(config.codebook_bits() / 8),
        "tail_residual": block_bits(residual) if residual is not None else 0,
        "boundary": sum(block_bits(a) for a in anchors),
    }
    bits["total"] = bits["codebook"] + bits["tail_residual"] + bits["boundary"]
    return bits


def encode_gops(x0s, conds, field, config: CodecConfig, gop_index: int = 0,
                anchors=None, want_checksum=False):
    """Encode B GOP targets sharing (seed, gop_index); returns (payloads, checksum)."""
    for x in x0s:
        _check_latent(x, config)
    anchors = anchors or [[] for _ in x0s]
    try:
        traj = _run(field, config, conds, gop_index, targets=[np.asarray(x, float) for x in x0s],
                    want_checksum=want_checksum)
    except IntegrationError as exc:
        raise EncodeError(f"trajectory failed in GOP {gop_index}: {exc}") from exc
    payloads = []
    for b, x0 in enumerate(x0s):
        recon, body = _finish(traj.finals[b], conds[b], x0, config)
        p = GopPayload(traj.selections[b], body, list(anchors[b]),
                       _payload_bits(config, body, anchors[b]), recon, traj.residual_vars[b])
        payloads.append(p)
    return payloads, traj.checksum


def encode_gop(x0, cond, field, config: CodecConfig, gop_index: int = 0, anchors=()) -> GopPayload:
    cond = cond or Conditioning.none(config.F)
    payloads, _ = encode_gops([x0], [cond], field, config, gop_index, [list(anchors)])
    return payloads[0]


def decode_gop(payload: GopPayload, cond, field, config: CodecConfig, gop_index: int = 0,
               checksum: int | None = None) -> np.ndarray:
    """Replay the trajectory; ``checksum`` is verified against this GOP's first codebook."""
    cond = cond or Conditioning.none(config.F)
    traj = _run(field, config, [cond], gop_index, selections=[payload.selections],
                expect_checksum=checksum)
    x = cond.pin(traj.finals[0])
    if payload.tail_residual is not None:
        x = x.copy()
        x[-1] = x[-1] + decode_frame_block(payload.tail_residual, config.frame_shape, RESIDUAL_BITS)
    return x


# --------------------------------------------------------------------------
# GOP chaining


def gop_layout(n_frames: int, config: CodecConfig) -> list[int]:
    """Start frame of each GOP in a latent video of ``n_frames`` frames."""
    F = config.F
    stride = F - config.overlap if config.mode == "T2V" else F - 1
    if config.mode != "T2V" and F < 2:
        raise ConfigError("anchored modes need at least two latent frames per GOP")
    span = n_frames - (F - stride)
    if n_frames < F or span % stride:
        raise ShapeError(
            f"{n_frames} latent frames do not tile into GOPs of {F} with stride {stride}"
        )
    return [g * stride for g in range(span // stride)]


def video_frames(gops: int, config: CodecConfig) -> int:
    if config.mode == "T2V":
        return gops * config.F - (gops - 1) * config.overlap
    return gops * (config.F - 1) + 1


def assemble(gop_recons, config: CodecConfig) -> np.ndarray:
    F = config.F
    if config.mode != "T2V":
        return np.concatenate([gop_recons[0]] + [g[1:] for g in gop_recons[1:]])
    ov = config.overlap
    out = [gop_recons[0]]
    for g in gop_recons[1:]:
        if ov:
            w = (np.arange(1, ov + 1) / (ov + 1)).reshape(-1, 1, 1, 1)
            tail = out[-1][-ov:]
            blended = (1.0 - w) * tail + w * g[:ov]
            out[-1] = out[-1][:-ov]
            out.append(blended)
        out.append(g[ov:])
    return np.concatenate(out)


@dataclass
class ChainResult:
    stream: GvccStream
    reconstruction: np.ndarray
    gop_reconstructions: list
    bits: dict
    first_frame: np.ndarray | None = None  # I2V side information (not in the stream)

    @property
    def config(self) -> CodecConfig:
        return self.stream.config

    @property
    def pixels(self) -> int:
        return len(self.stream.gops) * self.config.pixels_per_gop

    @property
    def bpp(self) -> float:
        return compute_bpp(self.bits["total"], self.pixels)

    @property
    def bpp_with_header(self) -> float:
        return compute_bpp(self.bits["total"] + 8 * (HEADER_SIZE + TRAILER_SIZE), self.pixels)

    def to_bytes(self) -> bytes:
        return serialize_stream(self.stream)


def _conditions(config, targets, prev_recon, prev_anchor):
    """Encoder-side conditioning and transmitted anchor blocks for one GOP."""
    F = config.F
    if config.mode == "T2V":
        return Conditioning.none(F), [], None
    if config.mode == "I2V":
        ref = targets[0] if prev_recon is None else prev_recon[-1]
        return Conditioning.first(ref, F), [], None
    blocks = []
    if prev_anchor is None:
        body = encode_frame_block(targets[0], config.anchor_bits)
        blocks.append(body)
        first = decode_frame_block(body, config.frame_shape, config.anchor_bits)
    else:
        first = prev_anchor
    body = encode_frame_block(targets[-1], config.anchor_bits)
    blocks.append(body)
    last = decode_frame_block(body, config.frame_shape, config.anchor_bits)
    return Conditioning.dual(first, last, F), blocks, last


def encode_videos(videos, field, config: CodecConfig) -> list[ChainResult]:
    """Chain-encode a batch of latent videos (B, frames, C, H, W) in config.mode."""
    videos = np.asarray(videos, dtype=np.float64)
    if videos.ndim != 5 or videos.shape[2:] != config.frame_shape:
        raise ShapeError(f"videos must be (B, frames, {config.frame_shape}), got {videos.shape}")
    starts = gop_layout(videos.shape[1], config)
    B = len(videos)
    recons = [[] for _ in range(B)]
    payloads = [[] for _ in range(B)]
    prev_anchor = [None] * B
    checksum = None
    for n, s in enumerate(starts):
        targets = videos[:, s:s + config.F]
        conds, blocks = [], []
        for b in range(B):
            prev = recons[b][-1] if recons[b] else None
            c, blk, last = _conditions(config, targets[b], prev, prev_anchor[b])
            conds.append(c)
            blocks.append(blk)
            prev_anchor[b] = last
        gop_payloads, cs = encode_gops(list(targets), conds, field, config, n, blocks,
                                       want_checksum=(n == 0))
        if n == 0:
            checksum = cs
        for b, p in enumerate(gop_payloads):
            payloads[b].append(p)
            recons[b].append(p.reconstruction)
    results = []
    for b in range(B):
        header = StreamHeader(config, len(starts), checksum)
        stream = GvccStream(header, payloads[b])
        bits = {key: sum(p.measured_bits[key] for p in payloads[b])
                for key in ("codebook", "tail_residual", "boundary", "total")}
        first = videos[b, 0].copy() if config.mode == "I2V" else None
        results.append(ChainResult(stream, assemble(recons[b], config), recons[b], bits, first))
    return results


def chain_t2v(video, field, config: CodecConfig) -> ChainResult:
    return encode_videos([video], field, config.replace(mode="T2V"))[0]


def chain_i2v(video, field, config: CodecConfig) -> ChainResult:
    return encode_videos([video], field, config.replace(mode="I2V"))[0]


def chain_flf2v(video, field, config: CodecConfig) -> ChainResult:
    return encode_videos([video], field, config.replace(mode="FLF2V"))[0]


def decode_stream(stream, field, first_frame=None, seed: int | None = None) -> ChainResult:
    """Decode a whole stream (bytes or parsed).

    I2V needs the first frame of the video as out-of-band side information.
    ``seed`` overrides the header seed; a wrong one fails the codebook check.
    """
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = parse_stream(bytes(stream))
    config = stream.config if seed is None else stream.config.replace(seed=seed)
    if config.mode == "I2V" and first_frame is None:
        raise ValueError("I2V decoding needs the first frame as side information")
    recons = []
    prev_anchor = None
    for n, payload in enumerate(stream.gops):
        F = config.F
        if config.mode == "T2V":
            cond = Conditioning.none(F)
        elif config.mode == "I2V":
            ref = np.asarray(first_frame, float) if n == 0 else recons[-1][-1]
            if ref.shape != config.frame_shape:
                raise ShapeError(f"first frame shape {ref.shape} != {config.frame_shape}")
            cond = Conditioning.first(ref, F)
        else:
            dec = [decode_frame_block(a, config.frame_shape, config.anchor_bits)
                   for a in payload.anchors]
            first = dec[0] if n == 0 else prev_anchor
            last = dec[-1]
            prev_anchor = last
            cond = Conditioning.dual(first, last, F)
        check = stream.header.codebook_checksum if n == 0 else None
        recons.append(decode_gop(payload, cond, field, config, n, checksum=check))
    bits = {key: sum(p.measured_bits[key] for p in stream.gops)
            for key in ("codebook", "tail_residual", "boundary", "total")}
    return ChainResult(stream, assemble(recons, config), recons, bits, first_frame)


# --------------------------------------------------------------------------
# rate accounting


def compute_bpp(bits: int, pixels: int) -> float:
    if pixels <= 0:
        raise ValueError("pixel count must be positive")
    return bits / pixels


def mode_bits(config: CodecConfig, tail_residual_bits: int = 0, boundary_bits: int = 0,
              gops: int = 1) -> int:
    """Per-mode bit total: codebook cost plus the mode's side information."""
    total = gops * config.codebook_bits()
    if config.mode == "I2V":
        total += tail_residual_bits
    elif config.mode == "FLF2V":
        total += boundary_bits
    return total


def mode_bpp(config: CodecConfig, tail_residual_bits: int = 0, boundary_bits: int = 0,
             gops: int = 1) -> float:
    return compute_bpp(mode_bits(config, tail_residual_bits, boundary_bits, gops),
                       gops * config.pixels_per_gop)
