"""Tweedie posterior moments and the frequency-domain Hutchinson estimator.

For an x-prediction model ``x(z) = E[x_0 | z]`` under a variance-preserving
schedule, ``Cov[x_0 | z] = (sigma**2 / alpha) * dx/dz``.  One JVP against a
standard normal probe ``eps`` scaled by ``sigma**2 / alpha`` therefore returns
``Cov @ eps``; comparing it with ``eps`` component-wise in a frequency basis
gives per-group variance estimates, and the same probe, rescaled per group, is
reused as the posterior noise sample.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional

import numpy as np

from .schedule import NoiseInfo
from .transforms import Identity, Transform, make_transform

AVERAGING_MODES = ("channel", "spatial", "global", "isotropic")

# axes of a [*B, h, w, F, C] frequency array reduced by each mode
_AVG_AXES = {
    "channel": (-1,),
    "spatial": (-4, -3),
    "global": (-4, -3, -1),
    "isotropic": (-4, -3, -2, -1),
}

EPS2_FLOOR = 1e-6
NOISE_FAC_CAP = 1e5
NOISE_FAC_LOG_CAP = np.log(NOISE_FAC_CAP)


@dataclasses.dataclass(frozen=True)
class CovEstimatorConfig:
    """Settings of the covariance-aware sampler.

    first_step_var: variance added to the prediction at t = 1.0, where the
      model is applied out of distribution.
    averaging: which frequency-array axes share a variance estimate.
    var_cap: upper clip on each group's variance.
    """

    first_step_var: float = 0.1
    averaging: str = "channel"
    block_size: int = 8
    var_cap: float = 1e4
    transform: str = "convdct"
    levels: int = 3
    first_step: bool = True

    def __post_init__(self):
        if self.first_step_var < 0:
            raise ValueError("first_step_var must be >= 0")
        if self.var_cap < 0:
            raise ValueError("var_cap must be >= 0")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.averaging not in AVERAGING_MODES:
            raise ValueError(f"unknown averaging mode {self.averaging!r}; expected one of {AVERAGING_MODES}")
        make_transform(self.transform, self.block_size, self.levels)  # validates the name

    def make_transform(self) -> Transform:
        if self.averaging == "isotropic":
            return Identity()
        return make_transform(self.transform, self.block_size, self.levels)

    @property
    def avg_axes(self) -> tuple:
        return _AVG_AXES[self.averaging]

    @property
    def label(self) -> str:
        return "identity" if self.averaging == "isotropic" else self.transform


def noise_scale_factor(logsnr) -> np.ndarray:
    """``sigma**2 / alpha`` from the log-SNR, capped at 1e5.

    ``sigma / alpha = exp(-l/2)`` and ``sigma = exp(-softplus(l)/2)``, so the
    product is ``exp(-(l + softplus(l)) / 2)``.  At ``l = -inf`` the cap binds.
    """
    l = np.asarray(logsnr, dtype=float)
    log_fac = -0.5 * (l + np.logaddexp(0.0, l))
    # when the cap binds return 1e5 itself; exp(log(1e5)) is off by one ulp
    out = np.where(log_fac >= NOISE_FAC_LOG_CAP, NOISE_FAC_CAP, np.exp(np.minimum(log_fac, NOISE_FAC_LOG_CAP)))
    return float(out) if out.ndim == 0 else out


def _frequency_moments(dx_dnoise, eps, cfg: CovEstimatorConfig, transform: Optional[Transform] = None):
    dx_dnoise = np.asarray(dx_dnoise, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if dx_dnoise.shape != eps.shape:
        raise ValueError(f"shape mismatch: dx_dnoise {dx_dnoise.shape} vs eps {eps.shape}")
    transform = transform or cfg.make_transform()
    dx_f = transform.forward(dx_dnoise)
    eps_f = transform.forward(eps)
    var_f = np.mean(eps_f * dx_f, axis=cfg.avg_axes, keepdims=True)
    eps2_f = np.mean(np.square(eps_f), axis=cfg.avg_axes, keepdims=True)
    return transform, eps_f, var_f, eps2_f


def hutchinson_noise(dx_dnoise, eps, cfg: CovEstimatorConfig, transform: Optional[Transform] = None):
    """Structured noise and the clipped per-group variances it was scaled with."""
    transform, eps_f, var_f, eps2_f = _frequency_moments(dx_dnoise, eps, cfg, transform)
    var_f = np.clip(var_f, 0.0, cfg.var_cap)
    eps2_f = np.maximum(eps2_f, EPS2_FLOOR)
    return transform.inverse(eps_f * np.sqrt(var_f / eps2_f)), var_f


def frequency_hutchinson(dx_dnoise, eps, cfg: CovEstimatorConfig) -> np.ndarray:
    """Generalized Hutchinson estimator in a frequency basis.

    ``dx_dnoise`` must be the model JVP against ``noise_scale_factor * eps``.
    Per group of frequency components (chosen by ``cfg.averaging``) the
    variance is ``mean(eps_f * dx_f)`` clipped to ``[0, var_cap]``; the probe is
    rescaled by ``sqrt(var / mean(eps_f**2))`` and mapped back.
    """
    return hutchinson_noise(dx_dnoise, eps, cfg)[0]


@dataclasses.dataclass(frozen=True)
class FrequencyVariance:
    """Per-group variance estimates; reduced axes are kept as singletons."""

    var_f: np.ndarray
    axes: tuple
    averaging: str

    def num_groups(self, batch_ndim: int = 0) -> int:
        """Number of distinct variance groups per sample."""
        return int(np.prod(self.var_f.shape[batch_ndim:]))


def num_variance_groups(var_f: np.ndarray, batch_ndim: int = 1) -> int:
    return int(np.prod(np.shape(var_f)[batch_ndim:]))


def estimate_frequency_variances(handle, z, n: NoiseInfo, probes: int, cfg: CovEstimatorConfig, rng: np.random.Generator) -> FrequencyVariance:
    """Monte-Carlo average of the per-group variance over independent probes.

    Probes are drawn exactly as the sampler draws them, so ``probes=1`` with the
    same generator state reproduces one sampler step.  Clipping to
    ``[0, var_cap]`` happens after averaging.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    z = np.asarray(z, dtype=float)
    fac = noise_scale_factor(n.logsnr)
    transform = cfg.make_transform()
    total = None
    for _ in range(probes):
        eps = rng.standard_normal(z.shape)
        _, dx = handle.predict_jvp(z, n, eps * fac)
        _, _, var_f, _ = _frequency_moments(dx, eps, cfg, transform)
        total = var_f if total is None else total + var_f
    return FrequencyVariance(var_f=np.clip(total / probes, 0.0, cfg.var_cap), axes=cfg.avg_axes, averaging=cfg.averaging)


# ---------------------------------------------------------------------------
# Exponential-family form of the one-step posterior


@dataclasses.dataclass(frozen=True)
class PosteriorExpFamilyParams:
    """``P(x_s | x_t) = exp(lam x_s.x_t - F(x_t) - G(x_s)) P(x_s)``.

    With transition ``x_t ~ N(alpha_tilde x_s, sigma_t**2 I)``:
    ``lam = alpha_tilde / sigma_t**2``, ``G(x) = alpha_tilde**2 |x|^2 / (2 sigma_t**2)``
    and ``F(x_t) = -log C + |x_t|^2 / (2 sigma_t**2) + log P(x_t)`` where ``C``
    is the Gaussian normalizer and ``P(x_t)`` the marginal of ``x_t``.
    Then ``grad F = lam E[x_s | x_t]`` and ``hess F = lam**2 Cov[x_s | x_t]``.
    """

    lam: float
    alpha_tilde: float
    sigma_t: float
    G: Callable[[np.ndarray], float]
    F: Optional[Callable[[np.ndarray], float]] = None


def posterior_exp_family_params(noise_t: NoiseInfo, noise_s: NoiseInfo, prior=None) -> PosteriorExpFamilyParams:
    """Parameters of the one-step posterior.

    ``prior`` is an optional :class:`~covsampler.denoiser.GaussianModel` for
    ``x_s``; when given, ``F`` is available in closed form.  Passing the clean
    state (``alpha=1, sigma=0``) as ``noise_s`` gives the ``x_0`` form used by
    x-prediction samplers, where ``lam = alpha_t / sigma_t**2``.
    """
    sigma_t = float(noise_t.sigma)
    alpha_s = float(noise_s.alpha)
    if not sigma_t > 0:
        raise ValueError("posterior parameters need sigma(t) > 0")
    if not alpha_s > 0:
        raise ValueError("posterior parameters need alpha(s) > 0")
    alpha_tilde = float(noise_t.alpha) / alpha_s
    var = sigma_t**2
    lam = alpha_tilde / var

    def G(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * alpha_tilde**2 * np.sum(x**2) / var

    F = None
    if prior is not None:
        mean = alpha_tilde * prior.mean
        cov = alpha_tilde**2 * prior.cov + var * np.eye(prior.dim)
        cov_inv = np.linalg.inv(cov)
        _, logdet = np.linalg.slogdet(cov)
        d = prior.dim
        log_c = -0.5 * d * np.log(2 * np.pi * var)

        def F(x_t):
            x_t = np.asarray(x_t, dtype=float).reshape(-1)
            r = x_t - mean
            log_marginal = -0.5 * (r @ cov_inv @ r + logdet + d * np.log(2 * np.pi))
            return -log_c + 0.5 * (x_t @ x_t) / var + log_marginal

    return PosteriorExpFamilyParams(lam=lam, alpha_tilde=alpha_tilde, sigma_t=sigma_t, G=G, F=F)
