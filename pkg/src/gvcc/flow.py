"""Interpolant schedules, score conversion and single-step integrators."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class IntegrationError(FloatingPointError):
    """A step produced or consumed non-finite values."""


@dataclass(frozen=True)
class InterpolantSchedule:
    alpha: Callable[[float], float]
    sigma: Callable[[float], float]
    alpha_dot: Callable[[float], float]
    sigma_dot: Callable[[float], float]
    name: str = "custom"


RF = InterpolantSchedule(
    alpha=lambda t: 1.0 - t,
    sigma=lambda t: t,
    alpha_dot=lambda t: -1.0,
    sigma_dot=lambda t: 1.0,
    name="rectified-flow",
)


def trig_schedule() -> InterpolantSchedule:
    """cos/sin interpolant; used to check the general score formula."""
    h = np.pi / 2
    return InterpolantSchedule(
        alpha=lambda t: float(np.cos(h * t)),
        sigma=lambda t: float(np.sin(h * t)),
        alpha_dot=lambda t: float(-h * np.sin(h * t)),
        sigma_dot=lambda t: float(h * np.cos(h * t)),
        name="trig",
    )


@dataclass(frozen=True)
class DiffusionSchedule:
    """g(t) = g_scale * t**2."""

    g_scale: float = 3.0

    def __post_init__(self):
        if not self.g_scale >= 0:
            raise ValueError(f"g_scale must be nonnegative, got {self.g_scale}")

    def __call__(self, t: float) -> float:
        return self.g_scale * t * t


@dataclass(frozen=True)
class TimeGrid:
    T: int
    N: int = 0
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1 or not 0 <= self.N < self.T:
            raise ValueError(f"need 0 <= N < T, got T={self.T}, N={self.N}")
        object.__setattr__(self, "nodes", 1.0 - np.arange(self.T + 1) / self.T)

    @property
    def dt(self) -> float:
        return 1.0 / self.T

    @property
    def codebook_steps(self) -> int:
        return self.T - self.N

    def is_codebook_step(self, k: int) -> bool:
        return k < self.T - self.N

    def __iter__(self):
        """Yield (k, t_k) for the T steps."""
        for k in range(self.T):
            yield k, float(self.nodes[k])


@dataclass(frozen=True)
class LatentState:
    data: np.ndarray
    t: float


def _same_shape(a, b, what="inputs"):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch between {what}: {np.shape(a)} vs {np.shape(b)}")


def interpolate(x0, x1, t: float, sched: InterpolantSchedule = RF):
    _same_shape(x0, x1, "x0 and x1")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if sched is RF:
        return (1.0 - t) * np.asarray(x0) + t * np.asarray(x1)
    return sched.alpha(t) * np.asarray(x0) + sched.sigma(t) * np.asarray(x1)


def score_from_velocity(x, t: float, u, sched: InterpolantSchedule = RF):
    """Score of the marginal p_t recovered from the velocity field.

    The rectified-flow schedule takes the specialised form
    ``-((1 - t) u + x) / t``; other schedules use the general expression in
    (alpha, sigma) and their derivatives.
    """
    _same_shape(x, u, "state and velocity")
    if not 0.0 < t <= 1.0:
        raise ValueError(f"score needs t in (0, 1], got {t}")
    if sched is RF:
        return -((1.0 - t) * u + x) / t
    return general_score(x, t, u, sched)


def general_score(x, t: float, u, sched: InterpolantSchedule):
    a, s = sched.alpha(t), sched.sigma(t)
    ad, sd = sched.alpha_dot(t), sched.sigma_dot(t)
    if s == 0.0:
        raise ValueError("score undefined where sigma(t) = 0")
    return (a * np.asarray(u) - ad * np.asarray(x)) / (ad * s - a * sd) / s


def sde_drift(x, t: float, u, diff: DiffusionSchedule, sched: InterpolantSchedule = RF):
    """Drift u - g^2/2 * score of the marginal-preserving reverse SDE."""
    g = diff(t)
    if g == 0.0:
        return u
    if sched is RF:
        if not 0.0 < t <= 1.0:
            raise ValueError(f"drift needs t in (0, 1], got {t}")
        return u + (0.5 * g * g) * ((1.0 - t) * u + x) / t
    return u - (0.5 * g * g) * general_score(x, t, u, sched)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise IntegrationError("non-finite value in integrator input")


def ode_step(state: LatentState, u, dt: float) -> LatentState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.t - dt < -1e-12:
        raise ValueError(f"step of {dt} from t={state.t} passes t=0")
    _same_shape(state.data, u, "state and velocity")
    _check_finite(u)
    return LatentState(state.data - u * dt, max(state.t - dt, 0.0))


def em_step(state: LatentState, drift, g_t: float, dt: float, z) -> LatentState:
    """Euler-Maruyama: x - drift*dt + g_t*sqrt(dt)*z.  g_t == 0 is exactly an ODE step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    _same_shape(state.data, z, "state and innovation")
    _check_finite(state.data, drift, z)
    nxt = state.data - drift * dt
    if g_t != 0.0:
        nxt = nxt + (g_t * np.sqrt(dt)) * z
    return LatentState(nxt, max(state.t - dt, 0.0))
