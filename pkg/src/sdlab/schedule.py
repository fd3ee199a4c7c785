"""Discrete variance-preserving noise schedules and timestep samplers.

Everything here is pure bookkeeping over precomputed coefficient tables:
forward diffusion, uniform timestep draws, the asynchronous shift sampler,
and linear annealing of the sampling window. Model code lives elsewhere.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, ValidationError

logger = logging.getLogger(__name__)

REFERENCE_STEPS = 1000
BETA_START = 1e-4
BETA_END = 0.02

_warned_clamp = False


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficient tables for x_t = alpha[t] * x + sigma[t] * eps.

    alpha is non-increasing, sigma non-decreasing, and alpha^2 + sigma^2 = 1
    at every step. Arrays are float64 and frozen after construction.
    """

    alpha: np.ndarray
    sigma: np.ndarray
    family: str = "linear"

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma", sigma)
        if alpha.ndim != 1 or alpha.shape != sigma.shape:
            raise ValidationError("alpha and sigma must be 1-D arrays of equal length")
        if alpha.shape[0] < 2:
            raise ValidationError("a schedule needs at least 2 steps")
        if np.any(np.diff(alpha) > 1e-12):
            raise ValidationError("alpha must be non-increasing")
        if np.any(np.diff(sigma) < -1e-12):
            raise ValidationError("sigma must be non-decreasing")
        residual = np.abs(alpha**2 + sigma**2 - 1.0)
        if residual.max() > 1e-6:
            raise ValidationError(
                f"schedule is not variance preserving, worst residual {residual.max():.3e}"
            )
        if alpha[0] < 0.999:
            raise ValidationError(f"alpha[0]={alpha[0]:.6f} leaves too much noise at t=0")
        if sigma[-1] < 0.99:
            raise ValidationError(f"sigma[T-1]={sigma[-1]:.6f} does not reach near-pure noise")
        alpha.flags.writeable = False
        sigma.flags.writeable = False

    @property
    def total_steps(self) -> int:
        return int(self.alpha.shape[0])

    @property
    def fingerprint(self) -> str:
        """Hash of the coefficient tables; checkpoints carry this for compat checks."""
        digest = hashlib.sha256()
        digest.update(self.alpha.tobytes())
        digest.update(self.sigma.tobytes())
        return digest.hexdigest()[:16]


def _reference_log_alpha_bar(family: str) -> np.ndarray:
    """log alpha_bar on the canonical 1000-step grid for the given family."""
    if family == "linear":
        betas = np.linspace(BETA_START, BETA_END, REFERENCE_STEPS)
        return np.cumsum(np.log1p(-betas))
    if family == "cosine":
        # Squared-cosine alpha_bar, evaluated at the right edge of each step.
        tau = (np.arange(REFERENCE_STEPS, dtype=np.float64) + 1.0) / REFERENCE_STEPS
        offset = 0.008
        f = np.cos((tau + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
        f0 = math.cos(offset / (1.0 + offset) * math.pi / 2.0) ** 2
        abar = np.clip(f / f0, 1e-12, 1.0)
        return np.log(abar)
    raise ConfigurationError(f"unknown beta family {family!r}, expected 'linear' or 'cosine'")


def build_schedule(total_steps: int = REFERENCE_STEPS, beta_family: str = "linear") -> NoiseSchedule:
    """Build a variance-preserving schedule with T steps.

    For T == 1000 this reproduces the standard discrete recurrence exactly.
    Other step counts interpolate log alpha_bar on the 1000-step reference
    grid, so the endpoints (near-identity at t=0, near-pure noise at t=T-1)
    are preserved at any resolution.
    """
    if not isinstance(total_steps, (int, np.integer)) or total_steps < 2:
        raise ValidationError(f"total_steps must be an integer >= 2, got {total_steps!r}")
    log_abar_ref = _reference_log_alpha_bar(beta_family)
    positions = np.linspace(0.0, REFERENCE_STEPS - 1.0, int(total_steps))
    log_abar = np.interp(positions, np.arange(REFERENCE_STEPS, dtype=np.float64), log_abar_ref)
    abar = np.exp(log_abar)
    alpha = np.sqrt(abar)
    sigma = np.sqrt(1.0 - abar)
    return NoiseSchedule(alpha=alpha, sigma=sigma, family=beta_family)


def _validate_timesteps(t, total_steps: int):
    """Normalize t to a python int or a 1-D int64 array, bounds checked."""
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    if isinstance(t, (int, np.integer)):
        t = int(t)
        if not 0 <= t < total_steps:
            raise ValidationError(f"timestep {t} outside [0, {total_steps})")
        return t
    arr = np.asarray(t)
    if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
        raise ValidationError("timesteps must be an int or a 1-D integer array")
    if arr.size == 0 or arr.min() < 0 or arr.max() >= total_steps:
        raise ValidationError(f"timesteps outside [0, {total_steps})")
    return arr.astype(np.int64)


def gather_coeffs(schedule: NoiseSchedule, t, like):
    """Return (alpha_t, sigma_t) shaped to broadcast against `like`.

    Scalar t yields python floats. A length-B integer array yields per-sample
    coefficients reshaped to (B, 1, ..., 1) matching `like`'s rank, as numpy
    or torch depending on the type of `like`.
    """
    t = _validate_timesteps(t, schedule.total_steps)
    if isinstance(t, int):
        return float(schedule.alpha[t]), float(schedule.sigma[t])
    a = schedule.alpha[t]
    s = schedule.sigma[t]
    shape = (-1,) + (1,) * (like.ndim - 1)
    a = a.reshape(shape)
    s = s.reshape(shape)
    if isinstance(like, torch.Tensor):
        a = torch.as_tensor(a, dtype=like.dtype, device=like.device)
        s = torch.as_tensor(s, dtype=like.dtype, device=like.device)
    return a, s


def diffuse(schedule: NoiseSchedule, x, eps, t):
    """Forward-diffuse a clean sample: alpha[t] * x + sigma[t] * eps.

    Works on numpy arrays and torch tensors alike; x and eps must have the
    same shape. t may be a scalar or one index per leading-dim sample.
    """
    if tuple(x.shape) != tuple(eps.shape):
        raise ValidationError(f"x shape {tuple(x.shape)} != eps shape {tuple(eps.shape)}")
    a, s = gather_coeffs(schedule, t, x)
    return a * x + s * eps


@dataclass(frozen=True)
class TimestepRange:
    """Closed integer window [t_min, t_max] that sampling draws from."""

    t_min: int
    t_max: int

    def __post_init__(self):
        if not (0 < self.t_min < self.t_max):
            raise ValidationError(
                f"need 0 < t_min < t_max, got t_min={self.t_min} t_max={self.t_max}"
            )


def sample_timestep(trange: TimestepRange, rng: np.random.Generator, size=None):
    """Uniform integer draw from [t_min, t_max] inclusive.

    size=None returns a python int; an integer size returns that many draws.
    """
    draws = rng.integers(trange.t_min, trange.t_max + 1, size=size)
    if size is None:
        return int(draws)
    return draws.astype(np.int64)


@dataclass(frozen=True)
class ShiftPolicy:
    """How the asynchronous timestep shift is drawn.

    mode 'none' always yields 0, 'deterministic' yields the cap
    floor(eta * (t - t_min)), 'uniform' draws an integer from [0, cap].
    """

    mode: str = "uniform"
    eta: float = 0.1

    def __post_init__(self):
        if self.mode not in ("none", "deterministic", "uniform"):
            raise ConfigurationError(
                f"shift mode {self.mode!r} not one of 'none', 'deterministic', 'uniform'"
            )
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must lie in [0, 1], got {self.eta}")


def sample_shift(policy: ShiftPolicy, t, trange: TimestepRange, rng: np.random.Generator,
                 total_steps: int):
    """Draw a timestep shift for each t, guaranteeing t + shift <= total_steps - 1.

    The shifted index is clamped at the last schedule step; clamping is
    expected near t_max and is surfaced once per process at warning level,
    afterwards at debug level.
    """
    scalar = isinstance(t, (int, np.integer))
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t_arr.min() < trange.t_min or t_arr.max() > trange.t_max:
        raise ValidationError(
            f"t outside [{trange.t_min}, {trange.t_max}]: {t_arr.min()}..{t_arr.max()}"
        )
    if policy.mode == "none" or policy.eta == 0.0:
        dt = np.zeros_like(t_arr)
    else:
        cap = np.floor(policy.eta * (t_arr - trange.t_min)).astype(np.int64)
        hard = total_steps - 1 - t_arr
        clamped = cap > hard
        cap = np.minimum(cap, hard)
        if policy.mode == "deterministic":
            dt = cap
        else:
            dt = rng.integers(0, cap + 1)
        if clamped.any():
            global _warned_clamp
            level = logging.DEBUG if _warned_clamp else logging.WARNING
            _warned_clamp = True
            logger.log(level, "shift cap clamped at schedule end for %d of %d draws",
                       int(clamped.sum()), t_arr.size)
    if scalar:
        return int(dt[0])
    return dt.astype(np.int64)


@dataclass(frozen=True)
class AnnealPlan:
    """Linear interpolation of the sampling window over a run.

    Both endpoints must be valid ranges; linearity then keeps every
    intermediate range valid as well.
    """

    start: TimestepRange
    end: TimestepRange
    total_iters: int

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValidationError(f"total_iters must be >= 1, got {self.total_iters}")


def anneal_range(plan: AnnealPlan, iteration: int) -> TimestepRange:
    """Window at a given iteration, endpoints rounded to nearest integer."""
    if not 0 <= iteration <= plan.total_iters:
        raise ValidationError(
            f"iteration {iteration} outside [0, {plan.total_iters}]"
        )
    frac = iteration / plan.total_iters
    t_min = round(plan.start.t_min + frac * (plan.end.t_min - plan.start.t_min))
    t_max = round(plan.start.t_max + frac * (plan.end.t_max - plan.start.t_max))
    return TimestepRange(t_min=int(t_min), t_max=int(t_max))
