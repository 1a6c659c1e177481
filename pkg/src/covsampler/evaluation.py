"""Distribution metrics, synthetic reference models and experiment runners."""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special
from scipy.spatial.distance import cdist

from .denoiser import GaussianModel, GuidedDenoiser, StationaryGaussianModel
from .samplers import SamplerSpec, StepPlan, as_spec, estimate_addim_variances, make_plan, run_sampler
from .schedule import Cosine, Schedule
from .transforms import BlockDCT, Identity, Transform
from .tweedie import CovEstimatorConfig

CSV_COLUMNS = (
    "sampler",
    "transform",
    "averaging",
    "steps",
    "nfe",
    "mean_err",
    "cov_err",
    "spectrum_err",
    "sw_dist",
    "energy_dist",
    "seed",
)

SW_PROJECTIONS = 128
ENERGY_MAX_SAMPLES = 2000

Reference = Union[GaussianModel, StationaryGaussianModel, np.ndarray]


# ---------------------------------------------------------------------------
# Synthetic models


def exact_gaussian_sampler(m, count: int, seed: int) -> np.ndarray:
    """Exact draws from a Gaussian model via its eigen/basis factorization."""
    return m.sample(count, np.random.default_rng(seed))


def anisotropic_gaussian(event_shape=(4, 4, 1), decay: float = 1.5, seed: int = 0, scale: float = 1.0) -> GaussianModel:
    """Dense Gaussian with a random eigenbasis and power-law eigenvalues."""
    rng = np.random.default_rng(seed)
    d = int(np.prod(event_shape))
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = scale * (1.0 + np.arange(d)) ** (-decay)
    return GaussianModel(mean=rng.normal(scale=0.1, size=d), cov=(q * eig) @ q.T, event_shape=tuple(event_shape))


def _power_law(freqs: np.ndarray, exponent: float, pixel_var: float) -> np.ndarray:
    d = (1.0 + freqs) ** (-exponent)
    return d * (pixel_var / d.mean())


def stationary_field_model(size: int = 32, channels: int = 3, exponent: float = 2.0, pixel_var: float = 0.25, mean: float = 0.0) -> StationaryGaussianModel:
    """Gaussian field with a power-law spectrum in the full-image DCT basis.

    Channels are independent; the average pixel variance is ``pixel_var``.
    """
    k = np.arange(size)
    radius = np.sqrt(k[:, None] ** 2 + k[None, :] ** 2).reshape(-1)
    spec = _power_law(radius, exponent, pixel_var)
    spectrum = np.broadcast_to(spec[None, None, :, None], (1, 1, size * size, channels)).copy()
    return StationaryGaussianModel(BlockDCT(size), spectrum, mean, (size, size, channels))


def block_diagonal_model(size: int = 16, channels: int = 3, block: int = 8, exponent: float = 2.0, pixel_var: float = 0.25, mean: float = 0.0) -> StationaryGaussianModel:
    """Gaussian that is exactly diagonal in the ``block x block`` DCT basis.

    Every block and channel shares one power-law spectrum over the in-block
    frequencies.
    """
    k = np.arange(block)
    radius = np.sqrt(k[:, None] ** 2 + k[None, :] ** 2).reshape(-1)
    spec = _power_law(radius, exponent, pixel_var)
    n = size // block
    spectrum = np.broadcast_to(spec[None, None, :, None], (n, n, block * block, channels)).copy()
    return StationaryGaussianModel(BlockDCT(block), spectrum, mean, (size, size, channels))


# ---------------------------------------------------------------------------
# Metrics


@dataclasses.dataclass(frozen=True)
class MetricReport:
    mean_err: float
    cov_err: float
    spectrum_err: float
    sw_dist: float
    energy_dist: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _ref_moments(reference) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(reference, GaussianModel):
        return reference.mean, reference.cov
    if isinstance(reference, StationaryGaussianModel):
        return reference.mean.reshape(-1), reference.dense_cov()
    ref = np.asarray(reference, dtype=float).reshape(len(reference), -1)
    return ref.mean(axis=0), np.cov(ref, rowvar=False)


def _cov_sqrt_images(reference, event_shape) -> np.ndarray:
    """``L`` as a stack of images with ``L L^T = cov``."""
    if isinstance(reference, StationaryGaussianModel):
        return reference.cov_sqrt()
    cols = reference._eigvec * np.sqrt(reference._eigval)
    return cols.T.reshape((-1,) + tuple(event_shape))


def frequency_spectrum(samples: np.ndarray, transform: Transform) -> np.ndarray:
    """Per-frequency empirical variance, averaged over positions and channels."""
    y = transform.forward(np.asarray(samples, dtype=float))
    return np.var(y, axis=0).mean(axis=(0, 1, 3))


def reference_spectrum(reference, transform: Transform, event_shape) -> np.ndarray:
    if isinstance(reference, (GaussianModel, StationaryGaussianModel)):
        y = transform.forward(_cov_sqrt_images(reference, event_shape))
        return np.sum(y**2, axis=0).mean(axis=(0, 1, 3))
    return frequency_spectrum(reference, transform)


def _gaussian_w2_sq(sorted_x: np.ndarray, mean: float, std: float) -> float:
    """Squared W2 between an empirical 1-D sample and ``N(mean, std^2)``.

    Integrates ``(x_(i) - Q(u))^2`` exactly over each quantile bin
    ``[(i-1)/n, i/n]`` using the truncated-normal moment identities.
    """
    n = sorted_x.size
    u = np.arange(n + 1) / n
    q = special.ndtri(u)  # -inf .. inf at the ends
    finite = np.isfinite(q)
    pdf = np.zeros_like(q)
    pdf[finite] = np.exp(-0.5 * q[finite] ** 2) / np.sqrt(2 * np.pi)
    q_pdf = np.zeros_like(q)
    q_pdf[finite] = q[finite] * pdf[finite]
    int_q = pdf[:-1] - pdf[1:]  # integral of Phi^-1 over each bin
    int_q2 = (u[1:] - u[:-1]) - (q_pdf[1:] - q_pdf[:-1])
    x = sorted_x - mean
    total = np.sum(x**2 / n - 2 * x * std * int_q + std**2 * int_q2)
    return float(max(total, 0.0))


def sliced_wasserstein(samples: np.ndarray, reference: Reference, projections: int = SW_PROJECTIONS, seed: int = 0) -> float:
    """Sliced 2-Wasserstein distance over random unit directions.

    Gaussian references are handled exactly per projection; sample references
    are compared through matched quantiles.
    """
    x = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    rng = np.random.default_rng([seed, 0x5D])
    theta = rng.standard_normal((projections, x.shape[1]))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    px = np.sort(x @ theta.T, axis=0)
    if isinstance(reference, (GaussianModel, StationaryGaussianModel)):
        mean, cov = _ref_moments(reference)
        means = theta @ mean
        stds = np.sqrt(np.einsum("pd,de,pe->p", theta, cov, theta))
        w2 = [_gaussian_w2_sq(px[:, j], means[j], stds[j]) for j in range(projections)]
    else:
        r = np.asarray(reference, dtype=float).reshape(len(reference), -1)
        pr = np.sort(r @ theta.T, axis=0)
        if len(pr) != len(px):
            levels = (np.arange(len(px)) + 0.5) / len(px)
            pr = np.quantile(pr, levels, axis=0)
        w2 = np.mean((px - pr) ** 2, axis=0)
    return float(np.sqrt(np.mean(w2)))


def _canonical_subset(x: np.ndarray, cap: int) -> np.ndarray:
    # sort rows so the result does not depend on sample order
    x = x[np.lexsort(x.T[::-1])]
    if len(x) > cap:
        x = x[np.linspace(0, len(x) - 1, cap).round().astype(int)]
    return x


def energy_distance(samples: np.ndarray, reference: np.ndarray, cap: int = ENERGY_MAX_SAMPLES) -> float:
    """``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` (V-statistic) on at most ``cap`` rows each."""
    x = _canonical_subset(np.asarray(samples, dtype=float).reshape(len(samples), -1), cap)
    y = _canonical_subset(np.asarray(reference, dtype=float).reshape(len(reference), -1), cap)
    value = 2 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean()
    return float(max(value, 0.0))


def default_spectrum_transform(event_shape) -> Transform:
    H, W = event_shape[0], event_shape[1]
    return BlockDCT(8) if H % 8 == 0 and W % 8 == 0 else Identity()


def compute_metrics(samples: np.ndarray, reference: Reference, transform: Optional[Transform] = None, seed: int = 0) -> MetricReport:
    samples = np.asarray(samples, dtype=float)
    if len(samples) < 2:
        raise ValueError("metrics need at least 2 samples")
    event_shape = samples.shape[1:]
    flat = samples.reshape(len(samples), -1)
    mean, cov = _ref_moments(reference)
    emp_cov = np.cov(flat, rowvar=False).reshape(cov.shape)
    mean_err = float(np.linalg.norm(flat.mean(axis=0) - mean))
    cov_err = float(np.linalg.norm(emp_cov - cov) / np.linalg.norm(cov))
    if len(event_shape) == 3:
        transform = transform or default_spectrum_transform(event_shape)
        emp = frequency_spectrum(samples, transform)
        ref = reference_spectrum(reference, transform, event_shape)
        spectrum_err = float(np.mean(np.abs(emp - ref) / ref))
    else:
        ref_var = np.diag(cov)
        spectrum_err = float(np.mean(np.abs(np.diag(emp_cov) - ref_var) / ref_var))
    if isinstance(reference, (GaussianModel, StationaryGaussianModel)):
        ref_samples = exact_gaussian_sampler(reference, min(len(samples), ENERGY_MAX_SAMPLES), seed + 1)
    else:
        ref_samples = reference
    return MetricReport(
        mean_err=mean_err,
        cov_err=cov_err,
        spectrum_err=spectrum_err,
        sw_dist=sliced_wasserstein(samples, reference, seed=seed),
        energy_dist=energy_distance(samples, ref_samples),
    )


# ---------------------------------------------------------------------------
# Experiments


@dataclasses.dataclass
class Experiment:
    """Denoiser, the distribution it should sample, and run settings."""

    handle: object
    reference: Reference
    schedule: Schedule = dataclasses.field(default_factory=Cosine)
    count: int = 1000
    spacing: str = "uniform-t"
    spectrum_transform: Optional[Transform] = None
    addim_calibration: int = 2000
    chunk_size: int = 256

    @property
    def guided(self) -> bool:
        return isinstance(self.handle, GuidedDenoiser)


def guided_experiment(model, cond_shift: float = 0.2, scale: float = 1.2, interval=(-np.inf, np.inf), **kwargs) -> Experiment:
    """Guidance between two Gaussians that differ only in their mean.

    Guided predictions are then exactly the denoiser of the Gaussian with mean
    ``mu_u + scale (mu_c - mu_u)`` wherever guidance is active; that Gaussian is
    the reference.  It is exact for the whole trajectory only when the interval
    covers every log-SNR, hence the default.
    """
    uncond = model
    cond = model.with_mean(model.mean + cond_shift)
    target = model.with_mean(model.mean + scale * cond_shift)
    handle = GuidedDenoiser(cond=cond, uncond=uncond, scale=scale, interval=tuple(interval))
    return Experiment(handle=handle, reference=target, **kwargs)


def steps_for_budget(spec: SamplerSpec, budget: int, guided: bool) -> int:
    per_step = spec.nfe_per_step(guided)
    if budget % per_step or budget < per_step:
        raise ValueError(f"NFE budget {budget} is not a positive multiple of {per_step} for {spec.kind}")
    return budget // per_step


def _calibration_data(exp: Experiment, seed: int) -> np.ndarray:
    if isinstance(exp.reference, (GaussianModel, StationaryGaussianModel)):
        return exact_gaussian_sampler(exp.reference, exp.addim_calibration, seed + 2)
    return np.asarray(exp.reference)


def run_cell(exp: Experiment, spec: SamplerSpec, steps: int, seed: int):
    """One sampler at one step count; returns ``(csv_row, SampleRun)``."""
    plan = make_plan(steps, exp.schedule, exp.guided, exp.spacing)
    addim_var = None
    if spec.kind == "addim":
        addim_var = estimate_addim_variances(exp.handle, _calibration_data(exp, seed), plan, seed)
    run = run_sampler(spec, exp.handle, plan, seed, exp.count, chunk_size=exp.chunk_size, addim_var=addim_var)
    report = compute_metrics(run.samples, exp.reference, exp.spectrum_transform, seed)
    if spec.kind == "covaware":
        transform, averaging = spec.cov.label, spec.cov.averaging
    else:
        transform, averaging = "none", "none"
    row = {
        "sampler": spec.kind,
        "transform": transform,
        "averaging": averaging,
        "steps": steps,
        "nfe": run.ledger.nominal,
        **report.as_dict(),
        "seed": seed,
    }
    return row, run


def run_comparison(exp: Experiment, samplers: Sequence, budgets: Sequence[int], seed: int, runs: Optional[list] = None) -> list[dict]:
    """One row per (sampler, NFE budget) with matched seeds across samplers."""
    rows = []
    for kind in samplers:
        spec = as_spec(kind)
        for budget in budgets:
            row, run = run_cell(exp, spec, steps_for_budget(spec, budget, exp.guided), seed)
            rows.append(row)
            if runs is not None:
                runs.append(run)
    return rows


def run_steps(exp: Experiment, samplers: Sequence, steps: Sequence[int], seed: int, runs: Optional[list] = None) -> list[dict]:
    """Like :func:`run_comparison` but indexed by step count instead of NFE."""
    rows = []
    for kind in samplers:
        spec = as_spec(kind)
        for n in steps:
            row, run = run_cell(exp, spec, n, seed)
            rows.append(row)
            if runs is not None:
                runs.append(run)
    return rows


@dataclasses.dataclass(frozen=True)
class AblationGrid:
    transforms: tuple
    averaging: tuple
    budgets: tuple
    base: object = None  # CovEstimatorConfig holding the remaining settings

    def __post_init__(self):
        if not (self.transforms and self.averaging and self.budgets):
            raise ValueError("ablation grid lists must be non-empty")


def run_ablation(grid: AblationGrid, exp: Experiment, seed: int, runs: Optional[list] = None) -> list[dict]:
    """Covariance-aware sampler over transforms x averaging modes x budgets."""
    base = grid.base or CovEstimatorConfig()
    specs, seen = [], set()
    for t in grid.transforms:
        for a in grid.averaging:
            cfg = dataclasses.replace(base, transform=t, averaging=a)
            if (cfg.label, a) not in seen:  # isotropic ignores the transform
                seen.add((cfg.label, a))
                specs.append(SamplerSpec("covaware", cfg))
    return run_comparison(exp, specs, grid.budgets, seed, runs)
