"""Byte layout of .gvcc streams.

Layout, all integers little-endian::

    header (fixed size, see HEADER_STRUCT)
    per GOP:
        selection block   (T-N) steps x F frames x atoms, each atom =
                          log2(K) index bits MSB-first then 1 sign bit
                          (1 = positive); zero-padded to a byte boundary
        I2V with tail correction:  u32 length + DEFLATE residual block
        FLF2V:             u32 length + DEFLATE anchor block, twice in
                           GOP 0 (first, last) and once afterwards (last)
    u32 CRC-32 of everything before it
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .codebook import StepSelection
from .config import MODES, CodecConfig

MAGIC = b"GVCC"
VERSION = 1
CODEC_DEFLATE = 0
FLAG_TAIL_CORRECTION = 0x01

HEADER_STRUCT = struct.Struct("<4sBBB4I3I6HIfQIQBBQ")
HEADER_SIZE = HEADER_STRUCT.size
TRAILER_SIZE = 4


class StreamError(ValueError):
    """Base for everything that can go wrong reading or writing a stream."""


class SerializationError(StreamError):
    pass


class ParseError(StreamError):
    pass


class BadMagicError(ParseError):
    pass


class VersionError(ParseError):
    pass


class TruncatedStreamError(ParseError):
    pass


class ChecksumError(StreamError):
    pass


class CodebookMismatchError(ChecksumError):
    pass


# --------------------------------------------------------------------------
# bit cursors


class BitWriter:
    """MSB-first bit packer; the final partial byte is zero-padded."""

    def __init__(self):
        self._buf = bytearray()
        self._acc = 0
        self._nacc = 0

    @property
    def bit_length(self) -> int:
        return 8 * len(self._buf) + self._nacc

    def write(self, value: int, nbits: int) -> None:
        if nbits < 0 or value < 0 or value >> nbits:
            raise SerializationError(f"value {value} does not fit in {nbits} bits")
        self._acc = (self._acc << nbits) | value
        self._nacc += nbits
        while self._nacc >= 8:
            self._nacc -= 8
            self._buf.append((self._acc >> self._nacc) & 0xFF)
        self._acc &= (1 << self._nacc) - 1

    def align(self) -> None:
        if self._nacc:
            self.write(0, 8 - self._nacc)

    def write_bytes(self, data: bytes) -> None:
        if self._nacc:
            raise SerializationError("byte write on an unaligned cursor")
        self._buf += data

    def getvalue(self) -> bytes:
        self.align()
        return bytes(self._buf)


class BitReader:
    """MSB-first reader confined to buf[start:end] (byte offsets)."""

    def __init__(self, buf: bytes, start: int = 0, end: int | None = None):
        self._buf = buf
        self._start = start
        self._end = len(buf) if end is None else end
        if not 0 <= start <= self._end <= len(buf):
            raise TruncatedStreamError(f"region [{start}, {end}) outside a {len(buf)}-byte buffer")
        self.bitpos = 8 * start

    @property
    def remaining_bits(self) -> int:
        return 8 * self._end - self.bitpos

    def read(self, nbits: int) -> int:
        if nbits > self.remaining_bits:
            raise TruncatedStreamError(
                f"need {nbits} bits at bit offset {self.bitpos}, only {self.remaining_bits} left"
            )
        value = 0
        pos = self.bitpos
        while nbits:
            byte = self._buf[pos >> 3]
            avail = 8 - (pos & 7)
            take = min(avail, nbits)
            chunk = (byte >> (avail - take)) & ((1 << take) - 1)
            value = (value << take) | chunk
            nbits -= take
            pos += take
        self.bitpos = pos
        return value

    def align(self) -> None:
        self.bitpos = min(-(-self.bitpos // 8) * 8, 8 * self._end)

    def read_bytes(self, n: int) -> bytes:
        if self.bitpos & 7:
            raise ParseError("byte read on an unaligned cursor")
        if 8 * n > self.remaining_bits:
            raise TruncatedStreamError(
                f"need {n} bytes at offset {self.bitpos // 8}, only {self.remaining_bits // 8} left"
            )
        p = self.bitpos // 8
        self.bitpos += 8 * n
        return bytes(self._buf[p:p + n])


def _log2(K: int) -> int:
    if K < 2 or K & (K - 1):
        raise SerializationError(f"K must be a power of two >= 2, got {K}")
    return K.bit_length() - 1


def write_selection(cursor: BitWriter, selection: StepSelection, K: int) -> int:
    width = _log2(K)
    before = cursor.bit_length
    for idx, sign in zip(selection.indices.tolist(), selection.signs.tolist()):
        if not 0 <= idx < K:
            raise SerializationError(f"atom index {idx} outside [0, {K})")
        cursor.write(idx, width)
        cursor.write(1 if sign > 0 else 0, 1)
    return cursor.bit_length - before


def read_selection(cursor: BitReader, M: int, K: int) -> StepSelection:
    width = _log2(K)
    need = M * (width + 1)
    if need > cursor.remaining_bits:
        raise TruncatedStreamError(
            f"selection needs {need} bits at bit offset {cursor.bitpos}, "
            f"only {cursor.remaining_bits} left"
        )
    idx = np.empty(M, dtype=np.int64)
    signs = np.empty(M, dtype=np.int8)
    for m in range(M):
        idx[m] = cursor.read(width)
        signs[m] = 1 if cursor.read(1) else -1
    try:
        return StepSelection(idx, signs)
    except ValueError as exc:
        raise ParseError(f"invalid selection ending at bit {cursor.bitpos}: {exc}") from None


# --------------------------------------------------------------------------
# quantized frame blocks (tail residuals and stub-coded anchors)


def _outward_f32(lo: float, hi: float) -> tuple[np.float32, np.float32]:
    lo32, hi32 = np.float32(lo), np.float32(hi)
    if lo32 > lo:
        lo32 = np.nextafter(lo32, np.float32(-np.inf))
    if hi32 < hi:
        hi32 = np.nextafter(hi32, np.float32(np.inf))
    return lo32, hi32


def quantize_frame(x: np.ndarray, bits: int = 8) -> bytes:
    """Per-channel min/max quantization; returns the raw (uncompressed) block.

    Each channel stores min and max as float32 (rounded outward so the range
    still covers the data) followed by the codes for that channel.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise SerializationError("cannot quantize non-finite values")
    levels = (1 << bits) - 1
    code_dtype = "<u1" if bits <= 8 else "<u2"
    parts = []
    for ch in x.reshape(x.shape[0], -1):
        lo, hi = _outward_f32(float(ch.min()), float(ch.max()))
        span = float(hi) - float(lo)
        if span > 0:
            codes = np.floor((ch - float(lo)) / span * levels + 0.5)
            codes = np.clip(codes, 0, levels)
        else:
            codes = np.zeros(ch.size)
        parts.append(struct.pack("<ff", lo, hi))
        parts.append(codes.astype(code_dtype).tobytes())
    return b"".join(parts)


def dequantize_frame(raw: bytes, shape, bits: int = 8) -> np.ndarray:
    levels = (1 << bits) - 1
    code_dtype = np.dtype("<u1" if bits <= 8 else "<u2")
    C = shape[0]
    per = int(np.prod(shape[1:], dtype=np.int64))
    step = 8 + per * code_dtype.itemsize
    if len(raw) != C * step:
        raise ParseError(f"quantized block has {len(raw)} bytes, expected {C * step}")
    out = np.empty((C, per))
    for c in range(C):
        lo, hi = struct.unpack_from("<ff", raw, c * step)
        codes = np.frombuffer(raw, dtype=code_dtype, count=per, offset=c * step + 8)
        out[c] = float(lo) + codes.astype(np.float64) * ((float(hi) - float(lo)) / levels)
    return out.reshape(shape)


def quantizer_bounds(raw: bytes, shape, bits: int = 8) -> np.ndarray:
    """Per-channel worst-case error (max - min) / (2^bits - 1) / 2."""
    code_size = 1 if bits <= 8 else 2
    per = int(np.prod(shape[1:], dtype=np.int64))
    step = 8 + per * code_size
    out = []
    for c in range(shape[0]):
        lo, hi = struct.unpack_from("<ff", raw, c * step)
        out.append((float(hi) - float(lo)) / ((1 << bits) - 1) / 2)
    return np.array(out)


def deflate(data: bytes) -> bytes:
    comp = zlib.compressobj(9, zlib.DEFLATED, -15)
    return comp.compress(data) + comp.flush()


def inflate(data: bytes) -> bytes:
    try:
        d = zlib.decompressobj(-15)
        out = d.decompress(data) + d.flush()
    except zlib.error as exc:
        raise ParseError(f"corrupt DEFLATE block: {exc}") from None
    if not d.eof or d.unused_data:
        raise ParseError("DEFLATE block is incomplete or has trailing data")
    return out


def encode_frame_block(x: np.ndarray, bits: int = 8) -> bytes:
    """Quantize and compress one frame; this is what goes on the wire."""
    return deflate(quantize_frame(x, bits))


def decode_frame_block(body: bytes, shape, bits: int = 8) -> np.ndarray:
    return dequantize_frame(inflate(body), shape, bits)


def write_residual_block(cursor: BitWriter, residual: np.ndarray, bits: int = 8) -> int:
    """Write u32 length + compressed block; returns the bits written."""
    return write_block(cursor, encode_frame_block(residual, bits))


def write_block(cursor: BitWriter, body: bytes) -> int:
    cursor.align()
    before = cursor.bit_length
    cursor.write_bytes(struct.pack("<I", len(body)))
    cursor.write_bytes(body)
    return cursor.bit_length - before


def read_block(cursor: BitReader) -> bytes:
    (n,) = struct.unpack("<I", cursor.read_bytes(4))
    return cursor.read_bytes(n)


def block_bits(body: bytes) -> int:
    return 8 * (4 + len(body))


# --------------------------------------------------------------------------
# stream header and container


@dataclass(frozen=True)
class StreamHeader:
    config: CodecConfig
    gop_count: int
    codebook_checksum: int
    codec_id: int = CODEC_DEFLATE

    def pack(self, stream_length: int) -> bytes:
        c = self.config
        flags = FLAG_TAIL_CORRECTION if c.tail_correction else 0
        return HEADER_STRUCT.pack(
            MAGIC, VERSION, MODES.index(c.mode), flags,
            c.F, c.C, c.H, c.W,
            c.F_px, c.H_px, c.W_px,
            c.T, c.N, c.M, c.M_tail, c.F_tail, c.overlap,
            c.K, c.g_scale, c.seed, self.gop_count, self.codebook_checksum,
            self.codec_id, c.anchor_bits, stream_length,
        )

    @classmethod
    def unpack(cls, buf: bytes) -> tuple["StreamHeader", int]:
        if len(buf) < 4 or buf[:4] != MAGIC:
            raise BadMagicError("not a GVCC stream (bad magic)")
        if len(buf) < 5:
            raise TruncatedStreamError("stream ends inside the header")
        if buf[4] != VERSION:
            raise VersionError(f"unsupported stream version {buf[4]}")
        if len(buf) < HEADER_SIZE:
            raise TruncatedStreamError(f"stream of {len(buf)} bytes is shorter than the header")
        (_, _, mode, flags, F, C, H, W, F_px, H_px, W_px, T, N, M, M_tail, F_tail, overlap,
         K, g_scale, seed, gop_count, checksum, codec_id, anchor_bits,
         length) = HEADER_STRUCT.unpack_from(buf)
        if mode >= len(MODES):
            raise ParseError(f"unknown mode byte {mode}")
        if codec_id != CODEC_DEFLATE:
            raise ParseError(f"unknown lossless codec id {codec_id}")
        if F_px % 4 != 1 or (F_px - 1) // 4 + 1 != F:
            raise ParseError(f"latent frames {F} inconsistent with {F_px} pixel frames")
        try:
            config = CodecConfig(
                mode=MODES[mode], M=M, M_tail=M_tail, K=K, T=T, N=N, g_scale=g_scale,
                gop_frames=F_px, F_tail=F_tail, overlap=overlap, seed=seed, C=C, H=H, W=W,
                H_px=H_px, W_px=W_px, tail_correction=bool(flags & FLAG_TAIL_CORRECTION),
                anchor_bits=anchor_bits,
            )
        except ValueError as exc:
            raise ParseError(f"header fields violate config invariants: {exc}") from None
        return cls(config, gop_count, checksum, codec_id), length


@dataclass
class GopPayload:
    selections: list  # [step][frame] -> StepSelection
    tail_residual: bytes | None = None
    anchors: list = field(default_factory=list)  # compressed anchor blocks, in order
    measured_bits: dict = field(default_factory=dict)
    # encoder/decoder-side product; not serialized
    reconstruction: np.ndarray | None = field(default=None, repr=False, compare=False)
    residual_vars: list = field(default_factory=list, repr=False, compare=False)

    def structurally_equal(self, other: "GopPayload") -> bool:
        return (
            self.selections == other.selections
            and self.tail_residual == other.tail_residual
            and list(self.anchors) == list(other.anchors)
            and self.measured_bits == other.measured_bits
        )


@dataclass
class GvccStream:
    header: StreamHeader
    gops: list[GopPayload]

    @property
    def config(self) -> CodecConfig:
        return self.header.config


def _anchor_count(config: CodecConfig, gop_index: int) -> int:
    if config.mode != "FLF2V":
        return 0
    return 2 if gop_index == 0 else 1


def _has_residual(config: CodecConfig) -> bool:
    return config.mode == "I2V" and config.tail_correction


def write_gop(cursor: BitWriter, payload: GopPayload, config: CodecConfig, gop_index: int) -> dict:
    steps = config.T - config.N
    if len(payload.selections) != steps:
        raise SerializationError(f"expected {steps} steps of selections, got {len(payload.selections)}")
    counts = config.atoms_per_frame()
    start = cursor.bit_length
    for step in payload.selections:
        if len(step) != config.F:
            raise SerializationError("each step needs one selection per latent frame")
        for sel, m in zip(step, counts):
            if sel.M != m:
                raise SerializationError(f"selection has {sel.M} atoms, config expects {m}")
            write_selection(cursor, sel, config.K)
    cursor.align()
    bits = {"codebook": cursor.bit_length - start, "tail_residual": 0, "boundary": 0}
    if _has_residual(config):
        if payload.tail_residual is None:
            raise SerializationError("I2V stream with tail correction needs a residual block")
        bits["tail_residual"] = write_block(cursor, payload.tail_residual)
    elif payload.tail_residual is not None:
        raise SerializationError("residual block present but the mode does not carry one")
    if len(payload.anchors) != _anchor_count(config, gop_index):
        raise SerializationError(
            f"GOP {gop_index} carries {len(payload.anchors)} anchors, "
            f"expected {_anchor_count(config, gop_index)}"
        )
    for body in payload.anchors:
        bits["boundary"] += write_block(cursor, body)
    bits["total"] = bits["codebook"] + bits["tail_residual"] + bits["boundary"]
    return bits


def read_gop(cursor: BitReader, config: CodecConfig, gop_index: int) -> GopPayload:
    counts = config.atoms_per_frame()
    start = cursor.bitpos
    selections = [
        [read_selection(cursor, m, config.K) for m in counts]
        for _ in range(config.T - config.N)
    ]
    cursor.align()
    bits = {"codebook": cursor.bitpos - start, "tail_residual": 0, "boundary": 0}
    residual = None
    if _has_residual(config):
        residual = read_block(cursor)
        bits["tail_residual"] = block_bits(residual)
    anchors = []
    for _ in range(_anchor_count(config, gop_index)):
        body = read_block(cursor)
        anchors.append(body)
        bits["boundary"] += block_bits(body)
    bits["total"] = bits["codebook"] + bits["tail_residual"] + bits["boundary"]
    return GopPayload(selections, residual, anchors, bits)


def serialize_stream(stream: GvccStream) -> bytes:
    config = stream.config
    if stream.header.gop_count != len(stream.gops):
        raise SerializationError("header GOP count disagrees with the payload list")
    cursor = BitWriter()
    for n, gop in enumerate(stream.gops):
        gop.measured_bits = write_gop(cursor, gop, config, n)
    body = cursor.getvalue()
    total = HEADER_SIZE + len(body) + TRAILER_SIZE
    head = stream.header.pack(total)
    out = head + body
    return out + struct.pack("<I", zlib.crc32(out))


def parse_stream(buf: bytes) -> GvccStream:
    """Validate magic, version, length and CRC, then decode every GOP payload."""
    buf = bytes(buf)
    header, length = StreamHeader.unpack(buf)
    if len(buf) < length:
        raise TruncatedStreamError(f"stream declares {length} bytes, only {len(buf)} present")
    if len(buf) > length:
        raise ParseError(f"{len(buf) - length} unexpected bytes after the stream")
    (crc,) = struct.unpack_from("<I", buf, length - TRAILER_SIZE)
    if zlib.crc32(buf[:length - TRAILER_SIZE]) != crc:
        raise ChecksumError("stream CRC-32 mismatch")
    cursor = BitReader(buf, HEADER_SIZE, length - TRAILER_SIZE)
    gops = [read_gop(cursor, header.config, n) for n in range(header.gop_count)]
    if cursor.remaining_bits:
        raise ParseError(f"{cursor.remaining_bits // 8} unparsed payload bytes")
    return GvccStream(header, gops)


def payload_bits(stream: GvccStream) -> int:
    return sum(g.measured_bits["total"] for g in stream.gops)
