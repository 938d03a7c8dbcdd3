"""gvcc command line.

Exit codes: 0 ok, 2 usage or shape error, 3 stream parse/checksum error,
4 numeric failure (diverged trajectory or a failed verification).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .bitstream import StreamError, parse_stream
from .codec import EncodeError, ShapeError, decode_stream, encode_videos
from .config import CodecConfig, ConfigError, parse_kv
from .data import KINDS, gen_synthetic
from .fields import (
    GaussianMixtureField,
    ToyField,
    ToyFieldWeights,
    TrainConfig,
    TrainingError,
    load_prior,
    save_prior,
    standard_normal_prior,
    train_toy_field,
)
from .flow import IntegrationError
from .harness import SWEEP_AXES, SweepSpec, cmd_coverage, cmd_sweep, cmd_verify_marginals
from .metrics import frame_mae, frame_mse, mse, psnr

EXIT_OK, EXIT_USAGE, EXIT_STREAM, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("codec config (names mirror CodecConfig fields)")
    g.add_argument("--config", help="key=value file; explicit flags override it")
    for f in dataclasses.fields(CodecConfig):
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        g.add_argument(*names, dest=f"cfg_{f.name}", default=None, metavar=f.name.upper())


def _config_from(args) -> CodecConfig:
    values = {}
    if args.config:
        with open(args.config) as fh:
            values.update(parse_kv(fh.read()))
    for f in dataclasses.fields(CodecConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            values[f.name] = v
    return CodecConfig.from_mapping(values)


def load_field(spec: str | None, latent_shape):
    """'normal' | 'gmm:<prior.npz>' | '<weights.gvcf>'."""
    if not spec or spec == "normal":
        return GaussianMixtureField(standard_normal_prior(latent_shape))
    if spec.startswith("gmm:"):
        prior = load_prior(spec[4:])
        if prior.event_shape != tuple(latent_shape):
            raise ShapeError(f"prior event shape {prior.event_shape} != latent {latent_shape}")
        return GaussianMixtureField(prior)
    weights = ToyFieldWeights.load(spec)
    if weights.latent_shape != tuple(latent_shape):
        raise ShapeError(f"field trained for {weights.latent_shape}, config wants {latent_shape}")
    return ToyField(weights)


def load_videos(path: str, index: int | None = None) -> np.ndarray:
    """(n, frames, C, H, W) from .npy or .npz ('videos'); a single video is promoted."""
    if path.endswith(".npz"):
        with np.load(path) as z:
            arr = z["videos"]
    else:
        arr = np.load(path)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5:
        raise ShapeError(f"expected (n, frames, C, H, W) or (frames, C, H, W), got {arr.shape}")
    if index is not None:
        if not 0 <= index < len(arr):
            raise UsageError(f"--index {index} outside dataset of {len(arr)}")
        arr = arr[index:index + 1]
    return arr


def _atomic_bytes(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _atomic_npy(path: str, arr: np.ndarray) -> None:
    tmp = f"{path}.tmp{os.getpid()}.npy"
    try:
        np.save(tmp, arr)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def side_path(stream_path: str) -> str:
    return stream_path + ".first.npy"


def _emit(report: dict, path: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    if path:
        _atomic_bytes(path, (text + "\n").encode())
    print(text)


def _metrics(recon, truth, peak=None) -> dict:
    return {
        "mse": mse(recon, truth),
        "psnr": psnr(recon, truth, peak),
        "frame_mse": frame_mse(recon, truth).tolist(),
        "frame_mae": frame_mae(recon, truth).tolist(),
    }


# --------------------------------------------------------------------------
# subcommands


def run_encode(args) -> int:
    config = _config_from(args)
    video = load_videos(args.input, args.index)
    if len(video) != 1:
        raise UsageError("encode takes one video; pass --index to pick one from a dataset")
    field = load_field(args.field, config.latent_shape)
    t0 = time.perf_counter()
    res = encode_videos(video, field, config)[0]
    elapsed = time.perf_counter() - t0
    data = res.to_bytes()
    _atomic_bytes(args.output, data)
    if config.mode == "I2V":
        # the first frame is out-of-band side information, not part of the stream
        _atomic_npy(side_path(args.output), res.first_frame)
    report = {
        "mode": config.mode, "gops": len(res.stream.gops), "stream_bytes": len(data),
        "bits": res.bits, "bpp": res.bpp, "bpp_header": res.bpp_with_header,
        "encode_s": None if args.no_timing else elapsed,
        **_metrics(res.reconstruction, video[0], args.peak),
    }
    if config.mode == "I2V":
        report["note"] = "I2V first frame is free side information (I-frame assumption)"
    _emit(report, args.report)
    return EXIT_OK


def run_decode(args) -> int:
    with open(args.input, "rb") as fh:
        stream = parse_stream(fh.read())
    config = stream.config
    truth = load_videos(args.ground_truth, args.index)[0] if args.ground_truth else None
    first = None
    if config.mode == "I2V":
        path = args.first_frame or side_path(args.input)
        if os.path.exists(path):
            first = np.load(path)
        elif truth is not None:
            first = truth[0]
        else:
            raise UsageError("I2V decoding needs the first frame (--first-frame)")
    field = load_field(args.field, config.latent_shape)
    t0 = time.perf_counter()
    res = decode_stream(stream, field, first_frame=first, seed=args.seed)
    elapsed = time.perf_counter() - t0
    _atomic_npy(args.output, res.reconstruction)
    report = {
        "mode": config.mode, "gops": len(stream.gops), "bits": res.bits, "bpp": res.bpp,
        "bpp_header": res.bpp_with_header, "decode_s": None if args.no_timing else elapsed,
    }
    if truth is not None:
        if truth.shape != res.reconstruction.shape:
            raise ShapeError(f"ground truth {truth.shape} != reconstruction {res.reconstruction.shape}")
        report.update(_metrics(res.reconstruction, truth, args.peak))
    _emit(report, args.report)
    return EXIT_OK


def _parse_values(text: str, axis: str):
    cast = float if axis == "g_scale" else int
    try:
        return tuple(cast(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"bad --values list: {exc}") from None


def run_sweep(args) -> int:
    config = _config_from(args)
    targets = load_videos(args.data)
    if args.count:
        targets = targets[:args.count]
    field = load_field(args.field, config.latent_shape)
    spec = SweepSpec(args.axis, _parse_values(args.values, args.axis), config, targets,
                     args.reps, args.out)
    text = cmd_sweep(spec, field, timing=not args.no_timing, decode=args.decode, peak=args.peak)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def run_verify(args) -> int:
    prior = load_prior(args.prior) if args.prior else None
    ok = True
    reports = []
    for g in args.g_scale:
        rep = cmd_verify_marginals(prior, g, args.trials, args.steps, tuple(args.checkpoints),
                                   args.seed, negative_control=not args.no_control)
        print("\n".join(rep.lines()))
        passed = rep.ok and (args.no_control or g == 0 or rep.control_detected)
        print(f"  => {'PASS' if passed else 'FAIL'}")
        ok &= passed
        reports.append(rep)
    return EXIT_OK if ok else EXIT_NUMERIC


def run_coverage(args) -> int:
    text = cmd_coverage(args.M, args.d, args.K, args.trials, args.seed, args.out)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def run_gen(args) -> int:
    ds = gen_synthetic(args.kind, args.count, (args.frames, args.C, args.H, args.W), args.seed)
    tmp = f"{args.out}.tmp{os.getpid()}.npz"
    np.savez(tmp, videos=ds.videos)
    os.replace(tmp, args.out)
    if ds.prior is not None and args.prior_out:
        save_prior(args.prior_out, ds.prior)
    print(f"wrote {ds.videos.shape} {args.kind} videos to {args.out}")
    return EXIT_OK


def run_train(args) -> int:
    data = load_videos(args.data)
    cfg = TrainConfig(hidden=args.hidden, n_freq=args.n_freq, epochs=args.epochs,
                      batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    res = train_toy_field(data, cfg)
    res.weights.save(args.out)
    for i, loss in enumerate(res.epoch_losses):
        print(f"epoch {i + 1:3d}  loss {loss:.5f}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gvcc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gvcc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    field_help = "velocity field: 'normal', 'gmm:<prior.npz>' or a .gvcf weights file"

    e = sub.add_parser("encode", help="encode one latent video into a .gvcc stream")
    e.add_argument("input")
    e.add_argument("output")
    e.add_argument("--index", type=int, help="video index inside a dataset file")
    e.add_argument("--field", default="normal", help=field_help)
    e.add_argument("--report", help="also write the JSON report here")
    e.add_argument("--peak", type=float, help="PSNR peak (default: ground-truth range)")
    e.add_argument("--no-timing", action="store_true")
    _config_args(e)
    e.set_defaults(func=run_encode)

    d = sub.add_parser("decode", help="decode a .gvcc stream to a .npy latent video")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--field", default="normal", help=field_help)
    d.add_argument("--ground-truth", help="video file for metrics")
    d.add_argument("--index", type=int)
    d.add_argument("--first-frame", help="I2V side information (default: <stream>.first.npy)")
    d.add_argument("--seed", type=int, help="override the header seed (a wrong one fails the checksum)")
    d.add_argument("--report")
    d.add_argument("--peak", type=float)
    d.add_argument("--no-timing", action="store_true")
    d.set_defaults(func=run_decode)

    s = sub.add_parser("sweep", help="one-axis rate-distortion sweep to CSV")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated axis values")
    s.add_argument("--data", required=True, help="dataset .npz/.npy of target videos")
    s.add_argument("--count", type=int, help="use only the first COUNT targets")
    s.add_argument("--reps", type=int, default=1, help="repetitions (seed offsets)")
    s.add_argument("--field", default="normal", help=field_help)
    s.add_argument("--out", help="CSV path (default stdout)")
    s.add_argument("--peak", type=float)
    s.add_argument("--decode", action="store_true", help="also decode and verify each stream")
    s.add_argument("--no-timing", action="store_true", help="blank the timing columns")
    _config_args(s)
    s.set_defaults(func=run_sweep)

    v = sub.add_parser("verify-marginals", help="ODE vs SDE vs closed-form moments on a GMM")
    v.add_argument("--prior", help="GMM prior .npz (default: built-in 3-component 2-D mixture)")
    v.add_argument("--g-scale", type=float, nargs="+", default=[1.0, 3.0])
    v.add_argument("--trials", type=int, default=10_000)
    v.add_argument("--steps", type=int, default=200)
    v.add_argument("--checkpoints", type=float, nargs="+", default=[0.8, 0.5, 0.2])
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--no-control", action="store_true", help="skip the wrong-drift control")
    v.set_defaults(func=run_verify)

    c = sub.add_parser("coverage", help="c(M, d) table to CSV")
    c.add_argument("--M", type=int, nargs="+", required=True)
    c.add_argument("--d", type=int, required=True)
    c.add_argument("--K", type=int, default=1024)
    c.add_argument("--trials", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=run_coverage)

    g = sub.add_parser("gen-data", help="write a synthetic latent-video dataset")
    g.add_argument("--kind", choices=KINDS, default="moving_blob")
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--frames", type=int, default=9, help="latent frames per video")
    g.add_argument("--C", type=int, default=4)
    g.add_argument("--H", type=int, default=8)
    g.add_argument("--W", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--prior-out", help="gmm_blobs only: save the generating prior")
    g.set_defaults(func=run_gen)

    t = sub.add_parser("train-field", help="fit the toy MLP velocity field")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--hidden", type=int, default=256)
    t.add_argument("--n-freq", type=int, default=4)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=run_train)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except StreamError as exc:
        print(f"gvcc: stream error: {exc}", file=sys.stderr)
        return EXIT_STREAM
    except (EncodeError, IntegrationError, TrainingError, ArithmeticError) as exc:
        print(f"gvcc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ShapeError, ValueError, OSError, KeyError) as exc:
        print(f"gvcc: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
