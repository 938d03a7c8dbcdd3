"""Zero-shot generative-codebook video compression at toy scale."""
from .config import CodecConfig, ConfigError, parse_kv
from .codec import (
    ChainResult,
    chain_flf2v,
    chain_i2v,
    chain_t2v,
    compute_bpp,
    decode_gop,
    decode_stream,
    encode_gop,
    encode_videos,
)
from .bitstream import parse_stream, serialize_stream

__version__ = "0.1.0"
