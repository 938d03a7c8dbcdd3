import numpy as np
import pytest

from gvcc.bitstream import (
    HEADER_SIZE,
    TRAILER_SIZE,
    CodebookMismatchError,
    decode_frame_block,
    encode_frame_block,
    parse_stream,
    quantizer_bounds,
    inflate,
)
from gvcc.codebook import StepSelection, initial_noise
from gvcc.codec import (
    ShapeError,
    assemble,
    chain_flf2v,
    chain_i2v,
    chain_t2v,
    compute_bpp,
    decode_gop,
    decode_stream,
    encode_gop,
    encode_videos,
    gop_layout,
    mode_bits,
    mode_bpp,
)
from gvcc.config import CodecConfig, ConfigError
from gvcc.data import gen_synthetic
from gvcc.fields import Conditioning, GaussianMixtureField, standard_normal_prior
from gvcc.flow import TimeGrid

SMALL = dict(gop_frames=9, C=2, H=4, W=4, K=256, M=8, M_tail=16, H_px=16, W_px=16)


def small(mode="T2V", **kw):
    return CodecConfig(mode=mode, **{**SMALL, **kw})


def field_for(cfg):
    return GaussianMixtureField(standard_normal_prior(cfg.latent_shape))


def videos(n, frames, cfg, seed=0):
    return gen_synthetic("moving_blob", n, (frames, cfg.C, cfg.H, cfg.W), seed).videos


def test_paper_rate_arithmetic():
    cfg = CodecConfig()
    assert cfg.codebook_bits() == 17 * 9 * 64 * 15 == 146880
    assert round(mode_bpp(cfg), 6) == 0.004830
    hd = CodecConfig(M=80, H_px=1080, W_px=1920)
    assert mode_bits(hd) == 183600 and round(mode_bpp(hd), 5) == 0.00268
    assert compute_bpp(0, 100) == 0
    with pytest.raises(ValueError):
        compute_bpp(10, 0)
    # Table 1 I2V split: 18.4 KB codebook next to a ~189 KB tail residual is ~9%
    assert round(18360 / (18360 + 189_000), 2) == 0.09


@pytest.mark.parametrize("mode,frames", [("T2V", 6), ("I2V", 5), ("FLF2V", 5)])
def test_round_trip_bitwise(mode, frames):
    cfg = small(mode)
    f = field_for(cfg)
    v = videos(2, frames, cfg)
    for res, x in zip(encode_videos(v, f, cfg), v):
        buf = res.to_bytes()
        back = decode_stream(buf, f, first_frame=res.first_frame)
        np.testing.assert_array_equal(back.reconstruction, res.reconstruction)
        assert back.bits == res.bits
        assert res.reconstruction.shape == x.shape
        # exact accounting: payload bits over pixels equals the reported BPP
        payload = 8 * (len(buf) - HEADER_SIZE - TRAILER_SIZE)
        assert res.bits["total"] == payload
        assert res.bpp == payload / (len(res.stream.gops) * cfg.pixels_per_gop)
        assert res.bpp_with_header == 8 * len(buf) / (len(res.stream.gops) * cfg.pixels_per_gop)


def test_flipped_sign_changes_decode():
    cfg = small()
    f = field_for(cfg)
    x0 = videos(1, 3, cfg)[0]
    p = encode_gop(x0, None, f, cfg)
    sel = p.selections[4][1]
    p.selections[4][1] = StepSelection(sel.indices, -sel.signs)
    out = decode_gop(p, None, f, cfg)
    assert not np.array_equal(out, p.reconstruction)


def test_wrong_seed_fails_checksum():
    cfg = small()
    f = field_for(cfg)
    res = chain_t2v(videos(1, 3, cfg)[0], f, cfg)
    with pytest.raises(CodebookMismatchError):
        decode_stream(res.to_bytes(), f, seed=cfg.seed + 1)


def test_g0_equals_pure_ode():
    cfg = small(g_scale=0.0)
    f = field_for(cfg)
    x0 = videos(1, 3, cfg)[0]
    p = encode_gop(x0, None, f, cfg)
    x = initial_noise(cfg.seed, 0, cfg.latent_shape)
    grid = TimeGrid(cfg.T)
    for _, t in grid:
        x = x - f(x, t) * grid.dt
    np.testing.assert_array_equal(p.reconstruction, x)
    assert len(p.selections) == cfg.T - cfg.N


def test_t2v_additivity_and_overlap():
    cfg = small()
    f = field_for(cfg)
    res = chain_t2v(videos(1, 9, cfg)[0], f, cfg)
    assert len(res.stream.gops) == 3
    assert res.bits["total"] == 3 * 8 * -(-cfg.codebook_bits() // 8)
    ov = small(overlap=1)
    assert gop_layout(5, ov) == [0, 2]
    a, b = np.zeros((3, 1, 1, 1)), np.ones((3, 1, 1, 1))
    out = assemble([a, b], ov)
    assert out.shape[0] == 5 and out[2, 0, 0, 0] == pytest.approx(0.5)
    ov2 = small(overlap=2)
    out = assemble([a, b], ov2)
    np.testing.assert_allclose(out[1:3, 0, 0, 0], [1 / 3, 2 / 3])
    with pytest.raises(ConfigError):
        small(overlap=3)
    r2 = chain_t2v(videos(1, 5, cfg)[0], f, ov)
    assert r2.reconstruction.shape[0] == 5


def test_i2v_correction_bound_locality_and_chaining():
    cfg = small("I2V")
    f = field_for(cfg)
    v = videos(1, 7, cfg)[0]
    on = chain_i2v(v, f, cfg)
    off = chain_i2v(v, f, cfg.replace(tail_correction=False))
    assert off.bits["tail_residual"] == 0 and on.bits["tail_residual"] > 0
    # GOP 0 is identical up to the corrected final frame
    g_on, g_off = on.gop_reconstructions[0], off.gop_reconstructions[0]
    np.testing.assert_array_equal(g_on[:-1], g_off[:-1])
    assert not np.array_equal(g_on[-1], g_off[-1])
    for n, gop in enumerate(on.stream.gops):
        raw = inflate(gop.tail_residual)
        bound = quantizer_bounds(raw, cfg.frame_shape)
        err = np.abs(v[2 * n + 2] - on.gop_reconstructions[n][-1]).reshape(cfg.C, -1).max(1)
        assert np.all(err <= bound * (1 + 1e-9))
    # the next GOP's anchor is the decoder-side corrected frame, bit for bit
    for a, b in zip(on.gop_reconstructions, on.gop_reconstructions[1:]):
        assert a[-1].tobytes() == b[0].tobytes()
    np.testing.assert_array_equal(on.reconstruction[0], v[0])
    with pytest.raises(ValueError):
        decode_stream(on.to_bytes(), f)


def test_i2v_zero_residual_is_identity():
    from gvcc.codec import _finish

    cfg = small("I2V")
    x = np.random.default_rng(0).normal(size=cfg.latent_shape)
    cond = Conditioning.first(x[0], cfg.F)
    out, body = _finish(x, cond, x, cfg)
    np.testing.assert_array_equal(out, x)
    assert body == encode_frame_block(np.zeros(cfg.frame_shape))
    np.testing.assert_array_equal(decode_frame_block(body, cfg.frame_shape), 0)


def test_flf2v_boundary_sharing():
    cfg = small("FLF2V", M=1, C=4, H=8, W=8)
    f = field_for(cfg)
    v = videos(1, 9, cfg)[0]  # 4 GOPs
    res = chain_flf2v(v, f, cfg)
    G = len(res.stream.gops)
    assert G == 4
    assert sum(len(g.anchors) for g in res.stream.gops) == G + 1
    for a, b in zip(res.gop_reconstructions, res.gop_reconstructions[1:]):
        assert a[-1].tobytes() == b[0].tobytes()
    last0 = decode_frame_block(res.stream.gops[0].anchors[-1], cfg.frame_shape)
    assert last0.tobytes() == res.gop_reconstructions[1][0].tobytes()
    # with one atom per frame the anchors dominate the rate
    assert res.bits["boundary"] / res.bits["total"] > 0.5
    back = parse_stream(res.to_bytes())
    assert [len(g.anchors) for g in back.gops] == [2, 1, 1, 1]


def test_shape_errors():
    cfg = small()
    f = field_for(cfg)
    with pytest.raises(ShapeError):
        encode_gop(np.zeros((2, 2, 4, 4)), None, f, cfg)
    with pytest.raises(ShapeError):
        chain_t2v(np.zeros((4, 2, 4, 4)), f, cfg)
    with pytest.raises(ShapeError):
        chain_i2v(np.zeros((4, 2, 4, 4)), f, cfg)


def test_bpp_ordering_by_mode():
    cfgs = {m: small(m) for m in ("T2V", "FLF2V", "I2V")}
    v = videos(1, 3, cfgs["T2V"])[0]
    bpp = {m: encode_videos(v[None], field_for(c), c)[0].bpp for m, c in cfgs.items()}
    assert bpp["T2V"] <= bpp["FLF2V"] <= bpp["I2V"]


def test_encoding_is_deterministic_and_batch_consistent():
    cfg = small()
    f = field_for(cfg)
    v = videos(3, 3, cfg)
    batch = encode_videos(v, f, cfg)
    again = encode_videos(v, f, cfg)
    for a, b in zip(batch, again):
        assert a.to_bytes() == b.to_bytes()
    # batched encodes decode exactly like single ones
    single = encode_videos(v[1:2], f, cfg)[0]
    back = decode_stream(batch[1].to_bytes(), f)
    np.testing.assert_array_equal(back.reconstruction, batch[1].reconstruction)
    assert single.bits == batch[1].bits
