"""Variance-preserving noise schedules and the per-time noise state."""

from __future__ import annotations

import dataclasses
from typing import Optional, Union

import numpy as np
from scipy import optimize, special

ArrayLike = Union[float, np.ndarray]


@dataclasses.dataclass(frozen=True)
class NoiseInfo:
    """Noise state at one time: ``z = alpha * x + sigma * eps``.

    ``logsnr`` is ``log(alpha**2 / sigma**2)``; it is ``+inf`` at clean data
    (``sigma == 0``) and ``-inf`` at pure noise (``alpha == 0``).
    """

    t: Optional[ArrayLike]
    alpha: ArrayLike
    sigma: ArrayLike
    logsnr: ArrayLike

    def broadcast_to(self, shape) -> "NoiseInfo":
        """Expand every field with trailing singleton axes and broadcast to ``shape``."""
        shape = tuple(shape)

        def fn(y):
            if y is None:
                return None
            y = np.asarray(y)
            if len(shape) < y.ndim:
                raise ValueError(f"{len(shape)=} shorter than {y.ndim=}")
            return np.broadcast_to(y.reshape(y.shape + (1,) * (len(shape) - y.ndim)), shape)

        return NoiseInfo(t=fn(self.t), alpha=fn(self.alpha), sigma=fn(self.sigma), logsnr=fn(self.logsnr))


def broadcast_noise_info(n: NoiseInfo, target_shape) -> NoiseInfo:
    return n.broadcast_to(target_shape)


def _from_logsnr(t, logsnr) -> NoiseInfo:
    logsnr = np.asarray(logsnr, dtype=float)
    alpha = np.sqrt(special.expit(logsnr))
    sigma = np.sqrt(special.expit(-logsnr))
    return NoiseInfo(t=t, alpha=_scalar(alpha), sigma=_scalar(sigma), logsnr=_scalar(logsnr))


def _scalar(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    return t


def _cosine_logsnr(t: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        l = -2.0 * np.log(np.tan(np.pi * t / 2.0))
    # tan(pi/2) is finite in floating point; pin the endpoints
    l = np.where(t == 1.0, -np.inf, l)
    return np.where(t == 0.0, np.inf, l)


@dataclasses.dataclass(frozen=True)
class Cosine:
    """``alpha = cos(pi t / 2)``, ``sigma = sin(pi t / 2)``."""

    def logsnr(self, t):
        return _cosine_logsnr(_check_t(t))

    def noise_info(self, t) -> NoiseInfo:
        t = _check_t(t)
        alpha = np.where(t == 1.0, 0.0, np.cos(np.pi * t / 2.0))
        sigma = np.where(t == 0.0, 0.0, np.sin(np.pi * t / 2.0))
        return NoiseInfo(t=_scalar(t), alpha=_scalar(alpha), sigma=_scalar(sigma), logsnr=_scalar(_cosine_logsnr(t)))


@dataclasses.dataclass(frozen=True)
class ShiftedCosine:
    """Cosine schedule with a constant offset added to the log-SNR."""

    shift: float = 0.0

    def logsnr(self, t):
        return _cosine_logsnr(_check_t(t)) + self.shift

    def noise_info(self, t) -> NoiseInfo:
        t = _check_t(t)
        return _from_logsnr(_scalar(t), self.logsnr(t))


@dataclasses.dataclass(frozen=True)
class LinearLogsnr:
    """Log-SNR interpolated linearly from ``l_max`` at t=0 to ``l_min`` at t=1."""

    l_min: float = -10.0
    l_max: float = 10.0

    def __post_init__(self):
        if not self.l_min < self.l_max:
            raise ValueError("LinearLogsnr needs l_min < l_max")

    def logsnr(self, t):
        t = _check_t(t)
        return self.l_max + (self.l_min - self.l_max) * t

    def noise_info(self, t) -> NoiseInfo:
        t = _check_t(t)
        return _from_logsnr(_scalar(t), self.logsnr(t))


Schedule = Union[Cosine, ShiftedCosine, LinearLogsnr]


def make_schedule(name: str = "cosine", shift: float = 0.0, l_min: float = -10.0, l_max: float = 10.0) -> Schedule:
    name = name.lower()
    if name == "cosine":
        return Cosine()
    if name in ("shifted_cosine", "shiftedcosine"):
        return ShiftedCosine(shift)
    if name in ("linear_logsnr", "linearlogsnr"):
        return LinearLogsnr(l_min, l_max)
    raise ValueError(f"unknown schedule {name!r}")


def make_noise_info(t: float, schedule: Schedule) -> NoiseInfo:
    return schedule.noise_info(t)


def time_for_logsnr(l: float, schedule: Schedule) -> float:
    """Numerically invert the (monotone decreasing) log-SNR curve."""
    lo, hi = float(schedule.logsnr(0.0)), float(schedule.logsnr(1.0))
    if l >= lo:
        return 0.0
    if l <= hi:
        return 1.0
    return optimize.brentq(lambda t: float(schedule.logsnr(t)) - l, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)


def make_time_grid(
    num_steps: int,
    spacing: str = "uniform-t",
    schedule: Optional[Schedule] = None,
    logsnr_range: tuple[float, float] = (-15.0, 15.0),
) -> np.ndarray:
    """Strictly decreasing times from 1.0 to 0.0 with ``num_steps`` intervals.

    ``uniform-logsnr`` spaces the grid evenly in log-SNR between the schedule's
    endpoint values; infinite endpoints are replaced by ``logsnr_range`` for
    placing the interior points, the returned endpoints stay at 1.0 and 0.0.
    """
    if int(num_steps) != num_steps or num_steps < 1:
        raise ValueError(f"num_steps must be a positive integer, got {num_steps}")
    num_steps = int(num_steps)
    if spacing == "uniform-t":
        times = np.linspace(1.0, 0.0, num_steps + 1)
    elif spacing == "uniform-logsnr":
        if schedule is None:
            raise ValueError("uniform-logsnr spacing needs a schedule")
        l_start = float(schedule.logsnr(1.0))
        l_end = float(schedule.logsnr(0.0))
        l_start = l_start if np.isfinite(l_start) else logsnr_range[0]
        l_end = l_end if np.isfinite(l_end) else logsnr_range[1]
        levels = np.linspace(l_start, l_end, num_steps + 1)
        times = np.array([1.0] + [time_for_logsnr(l, schedule) for l in levels[1:-1]] + [0.0])
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    if np.any(np.diff(times) >= 0):
        raise ValueError("time grid is not strictly decreasing; use fewer steps")
    return times
