"""Diffusion samplers with exact function-evaluation accounting.

All samplers work on x-predictions and share one stepping interface.  Times
run from ``t=1`` (pure noise) to ``t=0``.  Randomness is drawn from
per-sample streams keyed by ``(seed, sample index, step, draw)`` so that the
i-th sample sees the same noise under every sampler kind.
"""

from __future__ import annotations

import dataclasses
import hashlib
from typing import Optional

import numpy as np
from scipy import special

from .denoiser import Denoiser, EvalCounter, GuidedDenoiser, expected_passes, with_counter
from .schedule import NoiseInfo, Schedule, make_time_grid
from .tweedie import CovEstimatorConfig, hutchinson_noise, noise_scale_factor, num_variance_groups

SAMPLER_KINDS = ("covaware", "ddim", "ddpm", "addim", "heun", "dpmpp")

# network passes per step: (guided, unguided)
NFE_PER_STEP = {
    "covaware": (3, 2),
    "ddim": (2, 1),
    "ddpm": (2, 1),
    "addim": (2, 1),
    "heun": (4, 2),
    "dpmpp": (4, 2),
}

STREAM_BLOCK = 256


class InvalidStateError(RuntimeError):
    """A sampler was run without the setup it requires."""


class LedgerError(AssertionError):
    """Counted network passes disagree with the declared budget."""


@dataclasses.dataclass(frozen=True)
class SamplerSpec:
    kind: str
    cov: Optional[CovEstimatorConfig] = None

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler {self.kind!r}; expected one of {SAMPLER_KINDS}")
        if self.kind == "covaware" and self.cov is None:
            object.__setattr__(self, "cov", CovEstimatorConfig())

    def nfe_per_step(self, guided: bool) -> int:
        return NFE_PER_STEP[self.kind][0 if guided else 1]


def as_spec(kind) -> SamplerSpec:
    return kind if isinstance(kind, SamplerSpec) else SamplerSpec(kind)


@dataclasses.dataclass(frozen=True)
class StepPlan:
    grid: np.ndarray
    schedule: Schedule
    guided: bool = False

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or grid[0] != 1.0 or grid[-1] != 0.0 or np.any(np.diff(grid) >= 0):
            raise ValueError("time grid must decrease strictly from 1.0 to 0.0")
        object.__setattr__(self, "grid", grid)

    @property
    def steps(self) -> int:
        return self.grid.size - 1


def make_plan(steps: int, schedule: Schedule, guided: bool = False, spacing: str = "uniform-t") -> StepPlan:
    return StepPlan(make_time_grid(steps, spacing, schedule), schedule, guided)


# ---------------------------------------------------------------------------
# Per-sample noise streams


def _block_normals(seed: int, block: int, step: int, draw: int, shape: tuple) -> np.ndarray:
    ss = np.random.SeedSequence([seed, block, step, draw])
    return np.random.default_rng(ss).standard_normal((STREAM_BLOCK,) + tuple(shape))


class SampleStream:
    """Standard normals for samples ``[start, stop)`` at one sampler step.

    Row ``i`` only depends on ``(seed, start + i, step, draw)``, not on how the
    batch was chunked.  ``step=0`` is reserved for the initial noise.
    """

    def __init__(self, seed: int, start: int, stop: int, step: int):
        self.seed, self.start, self.stop, self.step = seed, start, stop, step
        self.draw = 0
        self.digests: dict = {}

    def standard_normal(self, shape) -> np.ndarray:
        shape = tuple(shape)
        if shape[0] != self.stop - self.start:
            raise ValueError(f"stream covers {self.stop - self.start} samples, asked for {shape}")
        event = shape[1:]
        parts = []
        first, last = self.start // STREAM_BLOCK, (self.stop - 1) // STREAM_BLOCK
        for block in range(first, last + 1):
            lo = max(self.start, block * STREAM_BLOCK) - block * STREAM_BLOCK
            hi = min(self.stop, (block + 1) * STREAM_BLOCK) - block * STREAM_BLOCK
            parts.append(_block_normals(self.seed, block, self.step, self.draw, event)[lo:hi])
        out = np.concatenate(parts, axis=0)
        self.digests[(self.step, self.draw)] = hashlib.sha256(out.tobytes()).hexdigest()[:16]
        self.draw += 1
        return out


# ---------------------------------------------------------------------------
# Steps


def ddim_step(x: np.ndarray, z_t: np.ndarray, noise_t: NoiseInfo, noise_s: NoiseInfo) -> np.ndarray:
    """``z_s = alpha_s x + (sigma_s / sigma_t) (z_t - alpha_t x)``; the ratio is 0 when ``sigma_s == 0``."""
    sigma_s, sigma_t = float(noise_s.sigma), float(noise_t.sigma)
    ratio = 0.0 if sigma_s == 0.0 else sigma_s / sigma_t
    return noise_s.alpha * x + ratio * (z_t - noise_t.alpha * x)


def cov_aware_step(handle: Denoiser, z_t, noise_t: NoiseInfo, noise_s: NoiseInfo, cfg: CovEstimatorConfig, rng):
    """One covariance-aware step; returns ``(z_s, var_f)``.

    ``var_f`` is ``None`` on the fixed-variance first step.
    """
    if cfg.first_step and noise_t.t is not None and float(noise_t.t) == 1.0:
        eps = rng.standard_normal(np.shape(z_t))
        x = handle.predict(z_t, noise_t) + eps * np.sqrt(cfg.first_step_var)
        return ddim_step(x, z_t, noise_t, noise_s), None
    eps = rng.standard_normal(np.shape(z_t))
    fac = noise_scale_factor(noise_t.logsnr)
    x_pred, dx_dnoise = handle.predict_jvp(z_t, noise_t, eps * fac)
    if np.ndim(z_t) == 4:
        noise, var_f = hutchinson_noise(dx_dnoise, eps, cfg)
    else:
        # non-image events are treated as a 1x1 image with D channels
        flat = (len(z_t), 1, 1, -1)
        noise, var_f = hutchinson_noise(dx_dnoise.reshape(flat), eps.reshape(flat), cfg)
        noise = noise.reshape(np.shape(z_t))
    return ddim_step(x_pred + noise, z_t, noise_t, noise_s), var_f


def ddpm_step(handle: Denoiser, z_t, noise_t: NoiseInfo, noise_s: NoiseInfo, rng) -> np.ndarray:
    """Ancestral step: sample ``q(z_s | z_t, x = x_pred)``.

    With ``a = alpha_t / alpha_s`` and ``v = sigma_t^2 - a^2 sigma_s^2`` (the
    variance of ``z_t`` given ``z_s``), Bayes' rule on the two Gaussians gives
    mean ``a sigma_s^2 / sigma_t^2 z_t + alpha_s v / sigma_t^2 x`` and variance
    ``v sigma_s^2 / sigma_t^2``.
    """
    x = handle.predict(z_t, noise_t)
    eps = rng.standard_normal(np.shape(z_t))
    alpha_t, sigma_t = float(noise_t.alpha), float(noise_t.sigma)
    alpha_s, sigma_s = float(noise_s.alpha), float(noise_s.sigma)
    a = alpha_t / alpha_s
    v = max(sigma_t**2 - a**2 * sigma_s**2, 0.0)
    mean = (a * sigma_s**2 / sigma_t**2) * z_t + (alpha_s * v / sigma_t**2) * x
    return mean + np.sqrt(v * sigma_s**2 / sigma_t**2) * eps


def addim_step(handle: Denoiser, z_t, noise_t: NoiseInfo, noise_s: NoiseInfo, data_var_estimate, rng) -> np.ndarray:
    """DDIM step from ``x_pred + sqrt(v) eps`` with a data-calibrated scalar ``v``.

    ``v`` estimates the average posterior variance ``E|x_0 - x_pred|^2 / D`` at
    ``noise_t``; see :func:`estimate_addim_variances`.  ``v = 0`` is plain DDIM.
    """
    if data_var_estimate is None:
        raise InvalidStateError("aDDIM needs a precomputed data variance estimate")
    x = handle.predict(z_t, noise_t)
    eps = rng.standard_normal(np.shape(z_t))
    return ddim_step(x + np.sqrt(float(data_var_estimate)) * eps, z_t, noise_t, noise_s)


def heun_step(handle: Denoiser, z_t, noise_t: NoiseInfo, noise_s: NoiseInfo) -> np.ndarray:
    """Heun step on the probability-flow ODE ``d(z / sigma) = x d(alpha / sigma)``.

    In these coordinates Euler is exactly DDIM, and the trapezoidal corrector
    is DDIM with the averaged prediction.  The last step (``sigma_s = 0``) is
    Euler only.
    """
    x_t = handle.predict(z_t, noise_t)
    z_euler = ddim_step(x_t, z_t, noise_t, noise_s)
    if float(noise_s.sigma) == 0.0:
        return z_euler
    x_s = handle.predict(z_euler, noise_s)
    return ddim_step(0.5 * (x_t + x_s), z_t, noise_t, noise_s)


def _noise_from_logsnr(l: float) -> NoiseInfo:
    return NoiseInfo(t=None, alpha=float(np.sqrt(special.expit(l))), sigma=float(np.sqrt(special.expit(-l))), logsnr=float(l))


def dpmpp_midpoint(noise_t: NoiseInfo, noise_s: NoiseInfo) -> Optional[NoiseInfo]:
    """Intermediate state halfway in log-SNR, or ``None`` when it is not finite."""
    lt, ls = float(noise_t.logsnr), float(noise_s.logsnr)
    if not (np.isfinite(lt) and np.isfinite(ls)):
        return None
    return _noise_from_logsnr(0.5 * (lt + ls))


def dpm_solverpp_step(handle: Denoiser, z_t, noise_t: NoiseInfo, noise_s: NoiseInfo) -> np.ndarray:
    """Single-step second-order DPM-Solver++ (2S, r = 1/2) with x-prediction.

    With ``h = lambda_s - lambda_t`` (``lambda`` = half log-SNR) the update
    ``z_s = (sigma_s/sigma_t) z_t - alpha_s (e^-h - 1) D`` uses
    ``D = (1 - 1/(2r)) x_t + 1/(2r) x_mid``, which for ``r = 1/2`` is the
    prediction at the log-SNR midpoint; the first-order update with
    ``D = x_t`` is exactly DDIM.  Steps starting from pure noise or ending at
    clean data have no finite midpoint and take the first-order update.
    """
    x_t = handle.predict(z_t, noise_t)
    mid = dpmpp_midpoint(noise_t, noise_s)
    if mid is None:
        return ddim_step(x_t, z_t, noise_t, noise_s)
    z_mid = ddim_step(x_t, z_t, noise_t, mid)
    x_mid = handle.predict(z_mid, mid)
    return ddim_step(x_mid, z_t, noise_t, noise_s)


# ---------------------------------------------------------------------------
# aDDIM calibration


def estimate_addim_variances(handle: Denoiser, data: np.ndarray, plan: StepPlan, seed: int = 0) -> np.ndarray:
    """Scalar posterior-variance estimate per grid time from a batch of data.

    ``v_t = mean |x_0 - x_pred(alpha_t x_0 + sigma_t eps)|^2 / D``.  Calibration
    passes are setup cost and are not charged to the sampling ledger.
    """
    rng = np.random.default_rng([seed, 0xADD1])
    data = np.asarray(data, dtype=float)
    out = np.zeros(plan.steps)
    for i, t in enumerate(plan.grid[:-1]):
        noise = plan.schedule.noise_info(t)
        z = noise.alpha * data + noise.sigma * rng.standard_normal(data.shape)
        out[i] = np.mean((data - handle.predict(z, noise)) ** 2)
    return out


# ---------------------------------------------------------------------------
# Run loop


@dataclasses.dataclass
class NfeLedger:
    """Nominal budget ``steps * per_step`` and the passes actually counted.

    ``reductions`` lists ``(step, passes, reason)`` for steps that legitimately
    use fewer passes than the nominal count (first covariance step, terminal
    second-order steps, guidance switched off outside its interval).
    """

    per_step: int
    steps: int
    evaluations: int = 0
    reductions: list = dataclasses.field(default_factory=list)

    @property
    def nominal(self) -> int:
        return self.per_step * self.steps

    def check(self) -> None:
        if self.nominal != self.per_step * self.steps:
            raise LedgerError("nominal NFE does not equal steps x per-step cost")
        saved = sum(r[1] for r in self.reductions)
        if self.evaluations != self.nominal - saved:
            raise LedgerError(
                f"counted {self.evaluations} passes, expected {self.nominal} - {saved} documented reductions"
            )


@dataclasses.dataclass
class SampleRun:
    spec: SamplerSpec
    seed: int
    samples: np.ndarray
    ledger: NfeLedger
    diagnostics: list
    stream_digests: dict

    @property
    def nfe(self) -> int:
        return self.ledger.nominal


def _declared_passes(spec: SamplerSpec, handle, noise_t: NoiseInfo, noise_s: NoiseInfo) -> tuple[int, str]:
    """Passes the step will use and a note on why it differs from nominal."""
    kind = spec.kind
    if kind == "covaware":
        first = spec.cov.first_step and float(noise_t.t) == 1.0
        passes = expected_passes(handle, noise_t, jvp=not first)
        return passes, "fixed-variance first step" if first else "guidance inactive"
    if kind in ("ddim", "ddpm", "addim"):
        return expected_passes(handle, noise_t, jvp=False), "guidance inactive"
    first = expected_passes(handle, noise_t, jvp=False)
    if kind == "heun":
        if float(noise_s.sigma) == 0.0:
            return first, "terminal Euler step"
        return first + expected_passes(handle, noise_s, jvp=False), "guidance inactive"
    mid = dpmpp_midpoint(noise_t, noise_s)
    if mid is None:
        return first, "first-order step without finite midpoint"
    return first + expected_passes(handle, mid, jvp=False), "guidance inactive"


def run_sampler(
    kind,
    handle: Denoiser,
    plan: StepPlan,
    seed: int,
    count: int,
    chunk_size: int = STREAM_BLOCK,
    addim_var: Optional[np.ndarray] = None,
) -> SampleRun:
    """Generate ``count`` samples; the ledger is checked on every chunk."""
    spec = as_spec(kind)
    guided = isinstance(handle, GuidedDenoiser)
    if guided != plan.guided:
        raise ValueError("plan.guided does not match the denoiser")
    if spec.kind == "addim" and addim_var is None:
        raise InvalidStateError("aDDIM needs addim_var from estimate_addim_variances")
    per_step = spec.nfe_per_step(guided)
    noises = [plan.schedule.noise_info(t) for t in plan.grid]
    event_shape = tuple(handle.event_shape)
    chunks = []
    diagnostics: list = []
    digests: dict = {}
    ledger = None
    for start in range(0, count, chunk_size):
        stop = min(count, start + chunk_size)
        counter = EvalCounter()
        counted = with_counter(handle, counter)
        chunk_ledger = NfeLedger(per_step=per_step, steps=plan.steps)
        init = SampleStream(seed, start, stop, 0)
        z = init.standard_normal((stop - start,) + event_shape)
        first_chunk = start == 0
        if first_chunk:
            digests.update(init.digests)
        for k in range(plan.steps):
            noise_t, noise_s = noises[k], noises[k + 1]
            rng = SampleStream(seed, start, stop, k + 1)
            before = counter.count
            var_f = None
            if spec.kind == "covaware":
                z, var_f = cov_aware_step(counted, z, noise_t, noise_s, spec.cov, rng)
            elif spec.kind == "ddim":
                z = ddim_step(counted.predict(z, noise_t), z, noise_t, noise_s)
            elif spec.kind == "ddpm":
                z = ddpm_step(counted, z, noise_t, noise_s, rng)
            elif spec.kind == "addim":
                z = addim_step(counted, z, noise_t, noise_s, addim_var[k], rng)
            elif spec.kind == "heun":
                z = heun_step(counted, z, noise_t, noise_s)
            else:
                z = dpm_solverpp_step(counted, z, noise_t, noise_s)
            declared, reason = _declared_passes(spec, handle, noise_t, noise_s)
            used = counter.count - before
            if used != declared:
                raise LedgerError(f"step {k}: used {used} passes, declared {declared}")
            if used < per_step:
                chunk_ledger.reductions.append((k, per_step - used, reason))
            if first_chunk:
                digests.update(rng.digests)
                if var_f is not None:
                    if not np.all(np.isfinite(var_f)) or var_f.min() < 0 or var_f.max() > spec.cov.var_cap:
                        raise FloatingPointError(f"step {k}: variance estimates outside [0, var_cap]")
                    diagnostics.append(
                        {
                            "step": k,
                            "t": float(noise_t.t),
                            "groups": num_variance_groups(var_f, batch_ndim=1),
                            "var_min": float(var_f.min()),
                            "var_mean": float(var_f.mean()),
                            "var_max": float(var_f.max()),
                        }
                    )
        chunk_ledger.evaluations = counter.count
        chunk_ledger.check()
        if ledger is None:
            ledger = chunk_ledger
        elif (ledger.evaluations, ledger.reductions) != (chunk_ledger.evaluations, chunk_ledger.reductions):
            raise LedgerError("chunks disagree on the evaluation count")
        chunks.append(z)
    samples = np.concatenate(chunks, axis=0)
    return SampleRun(spec=spec, seed=seed, samples=samples, ledger=ledger, diagnostics=diagnostics, stream_digests=digests)
