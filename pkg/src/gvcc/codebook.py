"""Reproducible codebooks, residual-guided atom selection and the codebook step."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .flow import DiffusionSchedule, LatentState, em_step, ode_step, sde_drift
from .prng import GaussianStream

DEFAULT_MEMORY_CAP = 1 << 30  # bytes of float64 atoms held at once
INITIAL_NOISE_STEP = 0xFFFFFFFF


class CodebookTooLarge(MemoryError):
    pass


class SelectionError(ValueError):
    pass


class DegenerateCompositeError(ArithmeticError):
    pass


@dataclass(frozen=True)
class CodebookParams:
    K: int
    d: int
    seed: int = 42
    step_index: int = 0
    gop_index: int = 0

    def __post_init__(self):
        if self.K < 1 or self.K & (self.K - 1):
            raise ValueError(f"K must be a power of two, got {self.K}")
        if self.d < 1:
            raise ValueError(f"d must be positive, got {self.d}")
        if self.step_index < 0 or self.gop_index < 0:
            raise ValueError("step and GOP indices are nonnegative")


def generate_codebook(params: CodebookParams, memory_cap: int = DEFAULT_MEMORY_CAP) -> np.ndarray:
    """K x d standard-normal atoms, filled row-major from the pinned stream."""
    nbytes = params.K * params.d * 8
    if nbytes > memory_cap:
        raise CodebookTooLarge(
            f"codebook needs {nbytes} bytes, cap is {memory_cap}; use iter_codebook_rows"
        )
    stream = GaussianStream(params.seed, params.gop_index, params.step_index)
    return stream.normal(params.K * params.d).reshape(params.K, params.d)


def iter_codebook_rows(params: CodebookParams, block_rows: int = 1024):
    """Stream the same atoms block by block: yields (first_row, block)."""
    stream = GaussianStream(params.seed, params.gop_index, params.step_index)
    for start in range(0, params.K, block_rows):
        rows = min(block_rows, params.K - start)
        yield start, stream.normal(rows * params.d).reshape(rows, params.d)


def codebook_checksum(atoms: np.ndarray) -> int:
    """64-bit BLAKE2b digest of the little-endian float64 atom bytes."""
    buf = np.ascontiguousarray(atoms, dtype="<f8").tobytes()
    return int.from_bytes(hashlib.blake2b(buf, digest_size=8).digest(), "little")


def initial_noise(seed: int, gop_index: int, shape) -> np.ndarray:
    """Shared starting latent x_1 for one GOP."""
    n = int(np.prod(shape, dtype=np.int64))
    return GaussianStream(seed, gop_index, INITIAL_NOISE_STEP).normal(n).reshape(shape)


@dataclass(frozen=True)
class StepSelection:
    indices: np.ndarray
    signs: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        sg = np.asarray(self.signs, dtype=np.int8)
        if idx.ndim != 1 or idx.shape != sg.shape:
            raise SelectionError("indices and signs must be equal-length vectors")
        if np.unique(idx).size != idx.size:
            raise SelectionError("selected indices must be distinct")
        if not np.all((sg == 1) | (sg == -1)):
            raise SelectionError("signs must be +1 or -1")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "signs", sg)

    @property
    def M(self) -> int:
        return self.indices.size

    def __eq__(self, other):
        return (
            isinstance(other, StepSelection)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.signs, other.signs)
        )

    def __hash__(self):
        return hash((self.indices.tobytes(), self.signs.tobytes()))


def denoise_estimate(x, t: float, u):
    """Clean-signal estimate x - t*u."""
    if t == 0.0:
        return np.asarray(x)
    return x - t * u


def _top_m(scores: np.ndarray, M: int):
    """Top-M by |score| along the last axis; ties go to the lower index."""
    order = np.argsort(-np.abs(scores), axis=-1, kind="stable")[..., :M]
    picked = np.take_along_axis(scores, order, axis=-1)
    signs = np.where(picked >= 0, 1, -1).astype(np.int8)
    return order, signs


def select_atoms(residual, codebook: np.ndarray, M: int) -> StepSelection:
    r = np.asarray(residual, dtype=np.float64).ravel()
    if not np.all(np.isfinite(r)):
        raise SelectionError("residual contains non-finite values")
    if codebook.shape[1] != r.size:
        raise SelectionError(f"residual has {r.size} elements, atoms have {codebook.shape[1]}")
    if not 1 <= M <= codebook.shape[0]:
        raise SelectionError(f"M={M} outside [1, K={codebook.shape[0]}]")
    idx, signs = _top_m(codebook @ r, M)
    return StepSelection(idx, signs)


def composite_noise(selection: StepSelection, codebook: np.ndarray) -> np.ndarray:
    """Signed atom sum scaled to unit population standard deviation."""
    if selection.indices.size and selection.indices.max() >= codebook.shape[0]:
        raise SelectionError("selection index outside the codebook")
    total = np.sum(selection.signs[:, None] * codebook[selection.indices], axis=0)
    sd = np.std(total)
    if not sd > 0:
        raise DegenerateCompositeError("composite of selected atoms has zero spread")
    return total / sd


# --------------------------------------------------------------------------
# one codebook-driven SDE step over a (F, C, H, W) latent


@dataclass
class StepRecord:
    """What one codebook step produced; selections are per latent frame."""

    selections: list[StepSelection]
    residual_var: float = float("nan")


def frame_atoms(codebook: np.ndarray, frame: int, frame_dim: int) -> np.ndarray:
    return codebook[:, frame * frame_dim:(frame + 1) * frame_dim]


def step_codebook(config, gop_index: int, step_index: int, memory_cap=DEFAULT_MEMORY_CAP):
    return generate_codebook(
        CodebookParams(config.K, config.latent_dim, config.seed, step_index, gop_index), memory_cap
    )


def codebook_innovation(selections, codebook, config) -> np.ndarray:
    """Per-frame composite noise assembled into a latent-shaped tensor."""
    fd = config.frame_dim
    z = np.empty(config.latent_shape)
    for f, sel in enumerate(selections):
        z[f] = composite_noise(sel, frame_atoms(codebook, f, fd)).reshape(config.frame_shape)
    return z


def select_frames(residual: np.ndarray, codebook: np.ndarray, config) -> list[StepSelection]:
    """Independent top-M selection for every latent frame of one residual."""
    if not np.all(np.isfinite(residual)):
        raise SelectionError("residual contains non-finite values")
    fd = config.frame_dim
    counts = config.atoms_per_frame()
    out = []
    for f in range(config.F):
        scores = frame_atoms(codebook, f, fd) @ residual[f].ravel()
        idx, signs = _top_m(scores, counts[f])
        out.append(StepSelection(idx, signs))
    return out


def apply_step(x: np.ndarray, t: float, u: np.ndarray, config, z: np.ndarray | None) -> np.ndarray:
    """Advance one grid step; z=None means a bit-free ODE step."""
    dt = 1.0 / config.T
    state = LatentState(x, t)
    if z is None:
        return ode_step(state, u, dt).data
    diff = DiffusionSchedule(config.g_scale)
    return em_step(state, sde_drift(x, t, u, diff), diff(t), dt, z).data


def codebook_step(state: LatentState, field, config, x0, cond=None, *, gop_index=0,
                  step_index=0, codebook=None):
    """Encoder-side codebook step; returns (next state, StepRecord)."""
    from .fields import eval_field

    t = state.t
    u = eval_field(field, state.data, t, cond)
    if codebook is None:
        codebook = step_codebook(config, gop_index, step_index)
    r = x0 - denoise_estimate(state.data, t, u)
    sels = select_frames(r, codebook, config)
    z = codebook_innovation(sels, codebook, config)
    nxt = apply_step(state.data, t, u, config, z)
    return LatentState(nxt, max(t - 1.0 / config.T, 0.0)), StepRecord(sels, float(np.var(r)))


def replay_step(state: LatentState, field, config, selections, cond=None, *, gop_index=0,
                step_index=0, codebook=None) -> LatentState:
    """Decoder-side twin of codebook_step driven by received selections."""
    from .fields import eval_field

    t = state.t
    u = eval_field(field, state.data, t, cond)
    if codebook is None:
        codebook = step_codebook(config, gop_index, step_index)
    z = codebook_innovation(selections, codebook, config)
    return LatentState(apply_step(state.data, t, u, config, z), max(t - 1.0 / config.T, 0.0))


# --------------------------------------------------------------------------
# coverage and the bit-budget check


def coverage_samples(M: int, d: int, trials: int = 200, seed: int = 0, K: int = 1024) -> np.ndarray:
    """Per-trial ||P_S r||^2 / ||r||^2 for Gaussian r and the top-M atoms of one codebook."""
    if trials < 1:
        raise ValueError("trials must be positive")
    if not 1 <= M <= K:
        raise ValueError(f"need 1 <= M <= K, got M={M}, K={K}")
    atoms = generate_codebook(CodebookParams(K, d, seed, 0, 0))
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((trials, d))
    idx, _ = _top_m(R @ atoms.T, M)
    out = np.empty(trials)
    for i in range(trials):
        q, _ = np.linalg.qr(atoms[idx[i]].T)
        p = q.T @ R[i]
        out[i] = (p @ p) / (R[i] @ R[i])
    return out


@lru_cache(maxsize=64)
def _coverage_cached(M, d, trials, seed, K):
    s = coverage_samples(M, d, trials, seed, K)
    return float(s.mean()), float(s.std(ddof=1) / np.sqrt(s.size)) if s.size > 1 else 0.0


def estimate_coverage(M: int, d: int, trials: int = 200, seed: int = 0, K: int = 1024) -> float:
    """Mean fraction of a Gaussian residual's energy in the span of M selected atoms."""
    if trials < 100:
        raise ValueError("coverage estimates need at least 100 trials")
    return _coverage_cached(M, d, trials, seed, K)[0]


def coverage_with_se(M, d, trials=200, seed=0, K=1024) -> tuple[float, float]:
    if trials < 100:
        raise ValueError("coverage estimates need at least 100 trials")
    return _coverage_cached(M, d, trials, seed, K)


@dataclass
class BudgetRecord:
    t: float
    injected: float  # g_t^2 * dt
    residual_var: float
    coverage: float
    rho: float
    passed: bool


@dataclass
class BudgetReport:
    records: list[BudgetRecord] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.records)

    @property
    def failing_steps(self) -> list[int]:
        return [k for k, r in enumerate(self.records) if not r.passed]


def validate_budget(config, residual_vars, coverage: float | None = None,
                    trials: int = 200) -> BudgetReport:
    """Check g_t^2 dt <= rho * c(M, d) * Var(r_t) at every codebook step.

    ``residual_vars`` holds one per-element residual variance per codebook
    step, in step order.  The check is advisory: nothing is blocked.
    """
    steps = config.T - config.N
    if len(residual_vars) != steps:
        raise ValueError(f"expected {steps} residual variances, got {len(residual_vars)}")
    if coverage is None:
        coverage = estimate_coverage(config.M, config.frame_dim, trials, config.seed,
                                     config.K)
    diff = DiffusionSchedule(config.g_scale)
    dt = 1.0 / config.T
    report = BudgetReport()
    for k, var in enumerate(residual_vars):
        t = 1.0 - k / config.T
        lhs = diff(t) ** 2 * dt
        rhs = config.rho * coverage * float(var)
        report.records.append(BudgetRecord(t, lhs, float(var), coverage, config.rho, lhs <= rhs))
    return report
