"""Rate-distortion sweeps, marginal-preservation checks and coverage tables."""
from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .codebook import coverage_with_se, validate_budget
from .codec import decode_stream, encode_videos, video_frames
from .config import CodecConfig, ConfigError
from .fields import GaussianMixturePrior, gaussian_velocity
from .flow import DiffusionSchedule, LatentState, TimeGrid, em_step, ode_step, sde_drift
from .metrics import data_range, frame_mae, frame_mse, mean_se
from .prng import GaussianStream

SWEEP_AXES = ("M", "K", "T", "g_scale", "gop_frames")

# Fixed sweep CSV layout.  frame_mse / frame_mae are ';'-joined per latent
# frame of the assembled video, averaged over targets.
CSV_COLUMNS = (
    "axis", "value", "rep", "mode", "M", "M_tail", "K", "T", "N", "g_scale", "gop_frames",
    "seed", "targets", "gops", "bits", "bpp", "bpp_header", "mse", "mse_se", "psnr", "peak",
    "budget_ok", "frame_mse", "frame_mae", "encode_s", "decode_s", "error",
)


def worker_count(cells: int) -> int:
    raw = os.environ.get("GVCC_THREADS", "")
    cap = int(raw) if raw.strip() else (os.cpu_count() or 1)
    return max(1, min(cap, cells))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepSpec:
    axis: str
    values: tuple
    base: CodecConfig
    targets: np.ndarray  # (n, frames, C, H, W)
    repetitions: int = 1
    output: str | None = None

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {self.axis!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be positive")
        self.values = tuple(self.values)
        if not self.values:
            raise ConfigError("a sweep needs at least one value")
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim != 5:
            raise ConfigError("targets must be (n, frames, C, H, W)")
        self.configs()  # surface invariant violations before running anything

    def config_for(self, value, rep: int) -> CodecConfig:
        typ = float if self.axis == "g_scale" else int
        return self.base.replace(**{self.axis: typ(value)}, seed=self.base.seed + rep)

    def configs(self):
        return [self.config_for(v, r) for v in self.values for r in range(self.repetitions)]

    def cells(self):
        return [(v, r) for v in self.values for r in range(self.repetitions)]


def fit_targets(targets: np.ndarray, config: CodecConfig) -> np.ndarray:
    """Trim videos to the longest prefix that tiles into whole GOPs."""
    n = targets.shape[1]
    gops = 0
    while video_frames(gops + 1, config) <= n:
        gops += 1
    if gops == 0:
        raise ConfigError(f"videos of {n} latent frames are shorter than one GOP ({config.F})")
    return targets[:, :video_frames(gops, config)]


def run_cell(spec: SweepSpec, value, rep: int, field, decode: bool = False,
             peak: float | None = None) -> dict:
    config = spec.config_for(value, rep)
    row = {
        "axis": spec.axis, "value": value, "rep": rep, "mode": config.mode, "M": config.M,
        "M_tail": config.M_tail, "K": config.K, "T": config.T, "N": config.N,
        "g_scale": config.g_scale, "gop_frames": config.gop_frames, "seed": config.seed,
        "targets": len(spec.targets), "error": "",
    }
    try:
        targets = fit_targets(spec.targets, config)
        t0 = time.perf_counter()
        results = encode_videos(targets, field, config)
        row["encode_s"] = time.perf_counter() - t0
        if decode:
            t0 = time.perf_counter()
            for res in results:
                back = decode_stream(res.to_bytes(), field, first_frame=res.first_frame)
                if not np.array_equal(back.reconstruction, res.reconstruction):
                    raise RuntimeError("decoded reconstruction differs from the encoder's")
            row["decode_s"] = time.perf_counter() - t0
        errs = [float(np.mean((r.reconstruction - x) ** 2)) for r, x in zip(results, targets)]
        m, se = mean_se(errs)
        peak_v = data_range(targets) if peak is None else peak
        fm = np.mean([frame_mse(r.reconstruction, x) for r, x in zip(results, targets)], axis=0)
        fa = np.mean([frame_mae(r.reconstruction, x) for r, x in zip(results, targets)], axis=0)
        rvars = np.mean([p.residual_vars for r in results for p in r.stream.gops], axis=0)
        row.update(
            gops=len(results[0].stream.gops),
            bits=float(np.mean([r.bits["total"] for r in results])),
            bpp=float(np.mean([r.bpp for r in results])),
            bpp_header=float(np.mean([r.bpp_with_header for r in results])),
            mse=m, mse_se=se,
            psnr=10.0 * np.log10(peak_v**2 / m) if m > 0 else float("inf"),
            peak=peak_v,
            budget_ok=validate_budget(config, list(rvars)).ok,
            frame_mse=";".join(_fmt(float(v)) for v in fm),
            frame_mae=";".join(_fmt(float(v)) for v in fa),
        )
    except Exception as exc:  # recorded per cell; the sweep carries on
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def run_sweep(spec: SweepSpec, field, decode: bool = False, peak: float | None = None,
              threads: int | None = None) -> list[dict]:
    cells = spec.cells()
    n = threads or worker_count(len(cells))
    if n == 1:
        return [run_cell(spec, v, r, field, decode, peak) for v, r in cells]
    with ThreadPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(run_cell, spec, v, r, field, decode, peak) for v, r in cells]
        return [f.result() for f in futures]  # spec order, not completion order


def rows_to_csv(rows, timing: bool = True, columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        out = []
        for col in columns:
            v = row.get(col, "")
            if col in ("encode_s", "decode_s") and not timing:
                v = ""
            out.append(_fmt(v))
        w.writerow(out)
    return buf.getvalue()


def write_text(path, text: str) -> None:
    """Write via a temporary file so a failure never leaves a partial output."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def cmd_sweep(spec: SweepSpec, field, timing: bool = True, decode: bool = False,
              peak: float | None = None) -> str:
    text = rows_to_csv(run_sweep(spec, field, decode, peak), timing)
    if spec.output:
        write_text(spec.output, text)
    return text


# --------------------------------------------------------------------------
# marginal preservation


def default_gmm(dim: int = 2, seed: int = 7) -> GaussianMixturePrior:
    """Three well-separated components with unequal weights and widths."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.5, size=(3, dim))
    return GaussianMixturePrior(np.array([0.5, 0.3, 0.2]), means, np.array([0.3, 0.5, 0.7]))


@dataclass
class MomentCheck:
    ensemble: str
    t: float
    mean_err: float  # worst |mean - true| in units of SE
    var_err: float  # worst |var/true - 1|
    mean_tol: float
    var_tol: float

    @property
    def passed(self) -> bool:
        return self.mean_err <= self.mean_tol and self.var_err <= self.var_tol


@dataclass
class MarginalReport:
    g_scale: float
    trials: int
    steps: int
    checks: list = field(default_factory=list)
    sde_equals_ode: bool | None = None
    control_checks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def control_detected(self) -> bool:
        """The wrong-drift ensemble must fail at least one checkpoint."""
        return any(not c.passed for c in self.control_checks)

    def lines(self) -> list[str]:
        out = [f"g_scale={self.g_scale:g} trials={self.trials} steps={self.steps}"]
        for label, checks in (("", self.checks), ("control ", self.control_checks)):
            for c in checks:
                out.append(
                    f"  {label}{c.ensemble:<4} t={c.t:.2f} mean {c.mean_err:5.2f} SE "
                    f"(<= {c.mean_tol:g})  var {100 * c.var_err:5.2f}% (<= {100 * c.var_tol:g}%)"
                    f"  {'pass' if c.passed else 'FAIL'}"
                )
        if self.sde_equals_ode is not None:
            out.append(f"  g=0 SDE == ODE: {self.sde_equals_ode}")
        return out


def simulate_ensemble(prior: GaussianMixturePrior, trials: int, steps: int, g_scale: float,
                      checkpoints, seed: int = 0, drift: str = "sde") -> dict:
    """Integrate ``trials`` trajectories from t=1 and return samples at each checkpoint.

    drift: "ode" (probability flow), "sde" (score-corrected drift with true
    Gaussian innovations) or "no_score" (innovations without the score term).
    """
    grid = TimeGrid(steps, 0)
    want = {}
    for t in checkpoints:
        k = int(round((1.0 - t) * steps))
        if abs(grid.nodes[k] - t) > 1e-9:
            raise ValueError(f"checkpoint t={t} is not on the {steps}-step grid")
        want[k] = t
    d = prior.dim
    x = GaussianStream(seed, 0, 0xFFFFFFFF).normal(trials * d).reshape(trials, *prior.event_shape)
    diff = DiffusionSchedule(g_scale)
    out = {}
    for k, t in grid:
        if k in want:
            out[want[k]] = x.copy()
        u = gaussian_velocity(x, t, prior)
        state = LatentState(x, t)
        if drift == "ode":
            x = ode_step(state, u, grid.dt).data
            continue
        z = GaussianStream(seed, 0, k).normal(x.size).reshape(x.shape)
        f = sde_drift(x, t, u, diff) if drift == "sde" else u
        x = em_step(state, f, diff(t), grid.dt, z).data
    if grid.T in want:
        out[want[grid.T]] = x.copy()
    return out


def moment_checks(prior, samples: dict, ensemble: str, mean_tol=4.0, var_tol=0.06):
    checks = []
    for t, xs in samples.items():
        mean, var = prior.marginal_moments(t)
        n = xs.shape[0]
        se = np.sqrt(var / n)
        m_err = float(np.max(np.abs(xs.mean(axis=0) - mean) / se))
        v_err = float(np.max(np.abs(xs.var(axis=0) / var - 1.0)))
        checks.append(MomentCheck(ensemble, t, m_err, v_err, mean_tol, var_tol))
    return checks


def cmd_verify_marginals(prior: GaussianMixturePrior | None = None, g_scale: float = 3.0,
                         trials: int = 10_000, steps: int = 200,
                         checkpoints=(0.8, 0.5, 0.2), seed: int = 0,
                         negative_control: bool = True) -> MarginalReport:
    prior = prior or default_gmm()
    report = MarginalReport(g_scale, trials, steps)
    ode = simulate_ensemble(prior, trials, steps, g_scale, checkpoints, seed, "ode")
    sde = simulate_ensemble(prior, trials, steps, g_scale, checkpoints, seed, "sde")
    report.checks += moment_checks(prior, ode, "ode")
    report.checks += moment_checks(prior, sde, "sde")
    if g_scale == 0:
        report.sde_equals_ode = all(np.array_equal(ode[t], sde[t]) for t in ode)
    if negative_control:
        bad = simulate_ensemble(prior, trials, steps, g_scale, checkpoints, seed, "no_score")
        report.control_checks = moment_checks(prior, bad, "ctrl")
    return report


# --------------------------------------------------------------------------
# coverage


COVERAGE_COLUMNS = ("M", "d", "K", "trials", "seed", "coverage", "se")


def coverage_rows(Ms, d: int, K: int, trials: int = 200, seed: int = 0) -> list[dict]:
    rows = []
    for M in Ms:
        c, se = coverage_with_se(int(M), d, trials, seed, K)
        rows.append({"M": int(M), "d": d, "K": K, "trials": trials, "seed": seed,
                     "coverage": c, "se": se})
    return rows


def cmd_coverage(Ms, d: int, K: int, trials: int = 200, seed: int = 0,
                 output: str | None = None) -> str:
    text = rows_to_csv(coverage_rows(Ms, d, K, trials, seed), columns=COVERAGE_COLUMNS)
    if output:
        write_text(output, text)
    return text
