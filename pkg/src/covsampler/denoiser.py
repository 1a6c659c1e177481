"""x-prediction denoisers with Jacobian-vector products.

A denoiser exposes ``predict(z, noise)`` and ``predict_jvp(z, noise, tangent)``
where ``z`` has shape ``[N, *event_shape]`` and ``noise`` carries scalar
schedule values shared by the whole batch.  The JVP is taken w.r.t. ``z``.

Analytic models (Gaussian, stationary Gaussian, isotropic Gaussian mixture)
serve as exact oracles; :class:`MlpDenoiser` is a small v-prediction network
differentiated with dual numbers.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Optional, Protocol

import numpy as np
from scipy import special

from .schedule import Cosine, NoiseInfo, Schedule
from .transforms import Transform


class Denoiser(Protocol):
    event_shape: tuple

    def predict(self, z: np.ndarray, noise: NoiseInfo) -> np.ndarray: ...

    def predict_jvp(self, z: np.ndarray, noise: NoiseInfo, tangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class DegenerateMixtureError(ArithmeticError):
    """All mixture responsibilities underflowed."""


def _coeffs(noise: NoiseInfo) -> tuple[float, float]:
    return float(noise.alpha), float(noise.sigma)


def _flat(z: np.ndarray, event_shape: tuple) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    n_event = len(event_shape)
    if tuple(z.shape[z.ndim - n_event :]) != tuple(event_shape):
        raise ValueError(f"trailing dims of {z.shape} do not match event shape {event_shape}")
    return z.reshape(z.shape[: z.ndim - n_event] + (-1,))


# ---------------------------------------------------------------------------
# Dense Gaussian prior


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianModel:
    """Data distribution ``N(mean, cov)`` on arrays of ``event_shape``.

    The covariance is eigendecomposed once; all posterior quantities are
    written as ``lam * sigma**2 / (sigma**2 + alpha**2 * lam)`` style ratios so
    the endpoints ``sigma = 0`` and ``alpha = 0`` stay finite.
    """

    mean: np.ndarray
    cov: np.ndarray
    event_shape: tuple = ()

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        d = mean.size
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {d}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        eigval, eigvec = np.linalg.eigh(cov)
        if eigval.min() <= 1e-12 * max(1.0, eigval.max()):
            raise ValueError("covariance is singular or not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "event_shape", tuple(self.event_shape) or (d,))
        object.__setattr__(self, "_eigval", eigval)
        object.__setattr__(self, "_eigvec", eigvec)
        object.__setattr__(self, "_mean_rot", eigvec.T @ mean)

    @property
    def dim(self) -> int:
        return self.mean.size

    def _gains(self, noise):
        alpha, sigma = _coeffs(noise)
        lam = self._eigval
        denom = sigma**2 + alpha**2 * lam
        return alpha, sigma, lam, denom

    def predict(self, z, noise):
        alpha, sigma, lam, denom = self._gains(noise)
        zf = _flat(z, self.event_shape)
        zr = zf @ self._eigvec
        xr = (sigma**2 * self._mean_rot + alpha * lam * zr) / denom
        return (xr @ self._eigvec.T).reshape(np.shape(z))

    def predict_jvp(self, z, noise, tangent):
        x = self.predict(z, noise)
        alpha, sigma, lam, denom = self._gains(noise)
        tr = _flat(tangent, self.event_shape) @ self._eigvec
        jt = ((alpha * lam / denom) * tr) @ self._eigvec.T
        return x, jt.reshape(np.shape(tangent))

    def jacobian(self, noise) -> np.ndarray:
        alpha, sigma, lam, denom = self._gains(noise)
        return (self._eigvec * (alpha * lam / denom)) @ self._eigvec.T

    def posterior_cov(self, noise) -> np.ndarray:
        alpha, sigma, lam, denom = self._gains(noise)
        return (self._eigvec * (lam * sigma**2 / denom)) @ self._eigvec.T

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal((count, self.dim))
        x = self.mean + (eps * np.sqrt(self._eigval)) @ self._eigvec.T
        return x.reshape((count,) + self.event_shape)

    def logpdf(self, x) -> np.ndarray:
        xr = (_flat(x, self.event_shape) - self.mean) @ self._eigvec
        return -0.5 * (np.sum(xr**2 / self._eigval, axis=-1) + np.sum(np.log(2 * np.pi * self._eigval)))

    def with_mean(self, mean) -> "GaussianModel":
        return GaussianModel(mean=np.asarray(mean).reshape(-1), cov=self.cov, event_shape=self.event_shape)


def gaussian_posterior_mean(z: np.ndarray, n: NoiseInfo, m: GaussianModel) -> np.ndarray:
    """``E[x_0 | z] = (S^-1 + a I)^-1 (S^-1 mu + (alpha / sigma^2) z)``, ``a = alpha^2 / sigma^2``."""
    return m.predict(z, n)


def gaussian_posterior_cov(n: NoiseInfo, m: GaussianModel) -> np.ndarray:
    """``Cov[x_0 | z] = (S^-1 + (alpha^2 / sigma^2) I)^-1``; does not depend on ``z``."""
    return m.posterior_cov(n)


# ---------------------------------------------------------------------------
# Gaussian prior that is diagonal in an orthonormal transform


@dataclasses.dataclass(frozen=True, eq=False)
class StationaryGaussianModel:
    """``x = mean + B^T (sqrt(spectrum) * eps)`` for an orthonormal transform ``B``.

    ``spectrum`` has the frequency layout ``[h, w, F, C]`` of ``basis`` applied
    to one image of ``event_shape = (H, W, C)``.  With ``basis`` a full-image
    DCT and a spectrum decaying in frequency this is a stationary-looking
    Gaussian field; with an 8x8 block DCT it is exactly diagonal in that basis.
    """

    basis: Transform
    spectrum: np.ndarray
    mean: np.ndarray
    event_shape: tuple

    def __post_init__(self):
        spectrum = np.asarray(self.spectrum, dtype=float)
        mean = np.broadcast_to(np.asarray(self.mean, dtype=float), self.event_shape).copy()
        expected = self.basis.forward(np.zeros(self.event_shape)).shape
        if spectrum.shape != expected:
            raise ValueError(f"spectrum shape {spectrum.shape} does not match basis layout {expected}")
        if np.any(spectrum <= 0) or not np.all(np.isfinite(spectrum)):
            raise ValueError("spectrum must be finite and strictly positive")
        object.__setattr__(self, "spectrum", spectrum)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "event_shape", tuple(self.event_shape))
        object.__setattr__(self, "_mean_f", self.basis.forward(mean))

    @property
    def dim(self) -> int:
        return int(np.prod(self.event_shape))

    def predict(self, z, noise):
        alpha, sigma = _coeffs(noise)
        d = self.spectrum
        zf = self.basis.forward(z)
        xf = (sigma**2 * self._mean_f + alpha * d * zf) / (sigma**2 + alpha**2 * d)
        return self.basis.inverse(xf)

    def predict_jvp(self, z, noise, tangent):
        x = self.predict(z, noise)
        alpha, sigma = _coeffs(noise)
        d = self.spectrum
        jt = self.basis.inverse(alpha * d / (sigma**2 + alpha**2 * d) * self.basis.forward(tangent))
        return x, jt

    def posterior_spectrum(self, noise) -> np.ndarray:
        """Posterior variances in the model's own basis."""
        alpha, sigma = _coeffs(noise)
        d = self.spectrum
        return d * sigma**2 / (sigma**2 + alpha**2 * d)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal((count,) + self.spectrum.shape)
        return self.mean + self.basis.inverse(np.sqrt(self.spectrum) * eps)

    def cov_sqrt(self) -> np.ndarray:
        """Columns ``L`` with ``L L^T = cov`` as images, shape ``[D, *event_shape]``."""
        eye = np.eye(self.dim).reshape((self.dim,) + self.spectrum.shape)
        return self.basis.inverse(np.sqrt(self.spectrum) * eye)

    def dense_cov(self) -> np.ndarray:
        L = self.cov_sqrt().reshape(self.dim, self.dim)
        return L.T @ L

    def with_mean(self, mean) -> "StationaryGaussianModel":
        return StationaryGaussianModel(basis=self.basis, spectrum=self.spectrum, mean=mean, event_shape=self.event_shape)


# ---------------------------------------------------------------------------
# Isotropic Gaussian mixture


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianMixtureModel:
    """``sum_k w_k N(mu_k, s_k^2 I)``."""

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    event_shape: tuple = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        means = np.asarray(self.means, dtype=float)
        means = means.reshape(means.shape[0], -1)
        s = np.asarray(self.scales, dtype=float)
        if w.ndim != 1 or w.size != means.shape[0] or s.shape != w.shape:
            raise ValueError("weights, means and scales disagree on the component count")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(s <= 0):
            raise ValueError("component scales must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "event_shape", tuple(self.event_shape) or (means.shape[1],))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _parts(self, z, noise):
        alpha, sigma = _coeffs(noise)
        zf = _flat(z, self.event_shape)
        var = alpha**2 * self.scales**2 + sigma**2  # marginal variance of z per component
        diff = zf[..., None, :] - alpha * self.means  # [..., K, D]
        logits = (
            np.log(self.weights)
            - 0.5 * np.sum(diff**2, axis=-1) / var
            - 0.5 * self.dim * np.log(2 * np.pi * var)
        )
        if not np.all(np.isfinite(np.max(logits, axis=-1))):
            raise DegenerateMixtureError("mixture responsibilities are not finite")
        # log-space softmax with max subtraction
        resp = np.exp(logits - special.logsumexp(logits, axis=-1, keepdims=True))
        comp_mean = (sigma**2 * self.means + alpha * self.scales[:, None] ** 2 * zf[..., None, :]) / var[:, None]
        return alpha, sigma, zf, var, diff, resp, comp_mean

    def predict(self, z, noise):
        _, _, zf, _, _, resp, comp_mean = self._parts(z, noise)
        x = np.einsum("...k,...kd->...d", resp, comp_mean)
        return x.reshape(np.shape(z))

    def predict_jvp(self, z, noise, tangent):
        alpha, sigma, zf, var, diff, resp, comp_mean = self._parts(z, noise)
        x = np.einsum("...k,...kd->...d", resp, comp_mean)
        u = _flat(tangent, self.event_shape)
        g = -np.einsum("...kd,...d->...k", diff, u) / var  # directional derivative of log N_k
        dresp = resp * (g - np.sum(resp * g, axis=-1, keepdims=True))
        jt = np.einsum("...k,...kd->...d", dresp, comp_mean)
        jt = jt + np.sum(resp * alpha * self.scales**2 / var, axis=-1, keepdims=True) * u
        return x.reshape(np.shape(z)), jt.reshape(np.shape(tangent))

    def posterior_cov(self, z, noise) -> np.ndarray:
        """Exact ``Cov[x_0 | z]`` for a single ``z`` (law of total covariance)."""
        alpha, sigma, zf, var, diff, resp, comp_mean = self._parts(np.asarray(z)[None], noise)
        resp, comp_mean = resp[0], comp_mean[0]
        x = resp @ comp_mean
        within = np.sum(resp * self.scales**2 * sigma**2 / var)
        second = np.einsum("k,kd,ke->de", resp, comp_mean, comp_mean)
        return within * np.eye(self.dim) + second - np.outer(x, x)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(self.weights.size, size=count, p=self.weights)
        x = self.means[k] + self.scales[k, None] * rng.standard_normal((count, self.dim))
        return x.reshape((count,) + self.event_shape)


def gmm_posterior_mean_jvp(z, n: NoiseInfo, m: GaussianMixtureModel, tangent):
    return m.predict_jvp(z, n, tangent)


# ---------------------------------------------------------------------------
# Small MLP with forward-mode differentiation


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, y: 1.0 - y**2),
    "silu": (lambda a: a * special.expit(a), lambda a, y: special.expit(a) * (1.0 + a * (1.0 - special.expit(a)))),
}


def _time_features(noise: NoiseInfo) -> np.ndarray:
    alpha, sigma = _coeffs(noise)
    return np.array([alpha, sigma])


@dataclasses.dataclass(frozen=True, eq=False)
class MlpDenoiser:
    """v-prediction MLP on flattened inputs, conditioned on ``(alpha, sigma)``.

    ``weights[i]`` has shape ``[fan_in, fan_out]``; the first layer sees the
    flattened ``z`` followed by the two time features.  The output ``v`` is
    turned into ``x = alpha * z - sigma * v`` before returning.
    """

    weights: tuple
    biases: tuple
    event_shape: tuple
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=float) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=float) for b in self.biases))
        object.__setattr__(self, "event_shape", tuple(int(s) for s in self.event_shape))
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        d = int(np.prod(self.event_shape))
        if self.weights[0].shape[0] != d + 2 or self.weights[-1].shape[1] != d:
            raise ValueError("layer sizes do not match the event shape")

    @classmethod
    def init(cls, event_shape, hidden=(64, 64), rng=None, activation="tanh") -> "MlpDenoiser":
        rng = np.random.default_rng(0) if rng is None else rng
        d = int(np.prod(event_shape))
        sizes = [d + 2, *hidden, d]
        weights = [rng.normal(scale=1.0 / math.sqrt(a), size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(weights=weights, biases=biases, event_shape=tuple(event_shape), activation=activation)

    def _inputs(self, z, noise):
        zf = _flat(z, self.event_shape)
        feats = np.broadcast_to(_time_features(noise), zf.shape[:-1] + (2,))
        return zf, np.concatenate([zf, feats], axis=-1)

    def velocity(self, z, noise):
        h = self._inputs(z, noise)[1]
        act, _ = _ACTIVATIONS[self.activation]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = act(h)
        return h

    def predict(self, z, noise):
        return self.predict_jvp(z, noise, None)[0]

    def predict_jvp(self, z, noise, tangent):
        """Dual-number pass: every layer maps ``(h, dh)`` to ``(f(h), f'(h) dh)``."""
        alpha, sigma = _coeffs(noise)
        zf, h = self._inputs(z, noise)
        act, dact = _ACTIVATIONS[self.activation]
        dh = None
        if tangent is not None:
            u = _flat(tangent, self.event_shape)
            # time features do not depend on z
            dh = np.concatenate([u, np.zeros(u.shape[:-1] + (2,))], axis=-1)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if dh is not None:
                dh = dh @ w
            if i < last:
                h = act(a)
                if dh is not None:
                    dh = dact(a, h) * dh
            else:
                h = a
        x = (alpha * zf - sigma * h).reshape(np.shape(z))
        if tangent is None:
            return x, None
        jt = (alpha * u - sigma * dh).reshape(np.shape(tangent))
        return x, jt


PARAMS_FORMAT = "covsampler-mlp"
PARAMS_VERSION = 1


def save_mlp(path, model: MlpDenoiser) -> None:
    """Write an ``.npz`` key->array map.

    Keys: ``format`` (str), ``version`` (int), ``meta`` (JSON string with
    ``event_shape``, ``activation``, ``num_layers``), ``w{i}``, ``b{i}``.
    """
    arrays = {
        "format": np.array(PARAMS_FORMAT),
        "version": np.array(PARAMS_VERSION),
        "meta": np.array(
            json.dumps(
                {"event_shape": list(model.event_shape), "activation": model.activation, "num_layers": len(model.weights)}
            )
        ),
    }
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_mlp(path) -> MlpDenoiser:
    with np.load(path, allow_pickle=False) as data:
        if "format" not in data or str(data["format"]) != PARAMS_FORMAT:
            raise ValueError(f"{path}: not an MLP parameter file")
        version = int(data["version"])
        if version != PARAMS_VERSION:
            raise ValueError(f"{path}: unsupported parameter file version {version}")
        meta = json.loads(str(data["meta"]))
        n = meta["num_layers"]
        return MlpDenoiser(
            weights=[data[f"w{i}"] for i in range(n)],
            biases=[data[f"b{i}"] for i in range(n)],
            event_shape=tuple(meta["event_shape"]),
            activation=meta["activation"],
        )


def train_mlp(
    data: np.ndarray,
    hidden=(64, 64),
    steps: int = 2000,
    batch_size: int = 256,
    lr: float = 2e-3,
    seed: int = 0,
    schedule: Optional[Schedule] = None,
    activation: str = "tanh",
) -> MlpDenoiser:
    """Fit a v-prediction MLP to ``data`` (``[N, *event_shape]``) with Adam."""
    schedule = schedule or Cosine()
    rng = np.random.default_rng(seed)
    event_shape = data.shape[1:]
    flat = data.reshape(len(data), -1)
    model = MlpDenoiser.init(event_shape, hidden, rng, activation)
    params = [*model.weights, *model.biases]
    n_layers = len(model.weights)
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    act, dact = _ACTIVATIONS[activation]
    b1, b2 = 0.9, 0.999
    for step in range(1, steps + 1):
        x = flat[rng.integers(0, len(flat), batch_size)]
        t = rng.uniform(1e-3, 1 - 1e-3, size=batch_size)
        ni = schedule.noise_info(t)
        alpha, sigma = np.asarray(ni.alpha)[:, None], np.asarray(ni.sigma)[:, None]
        eps = rng.standard_normal(x.shape)
        z = alpha * x + sigma * eps
        target = alpha * eps - sigma * x
        # forward with cached activations
        ws, bs = params[:n_layers], params[n_layers:]
        h = np.concatenate([z, alpha, sigma], axis=-1)
        cache = []
        for i in range(n_layers):
            a = h @ ws[i] + bs[i]
            cache.append((h, a))
            h = act(a) if i < n_layers - 1 else a
        grad_out = 2.0 * (h - target) / h.size
        grads_w, grads_b = [None] * n_layers, [None] * n_layers
        g = grad_out
        for i in reversed(range(n_layers)):
            hin, a = cache[i]
            if i < n_layers - 1:
                g = g * dact(a, act(a))
            grads_w[i] = hin.T @ g
            grads_b[i] = g.sum(axis=0)
            g = g @ ws[i].T
        grads = grads_w + grads_b
        for j, (p, gr) in enumerate(zip(params, grads)):
            m1[j] = b1 * m1[j] + (1 - b1) * gr
            m2[j] = b2 * m2[j] + (1 - b2) * gr**2
            p -= lr * (m1[j] / (1 - b1**step)) / (np.sqrt(m2[j] / (1 - b2**step)) + 1e-8)
    return MlpDenoiser(weights=params[:n_layers], biases=params[n_layers:], event_shape=event_shape, activation=activation)


# ---------------------------------------------------------------------------
# Classifier-free guidance and evaluation counting


@dataclasses.dataclass(frozen=True, eq=False)
class GuidedDenoiser:
    """``x_g = x_u + scale * (x_c - x_u)`` inside a closed log-SNR interval.

    Outside the interval the conditional prediction is returned unchanged.  The
    JVP treats ``x_u`` as a constant, so a guided JVP costs one unconditional
    pass plus one conditional JVP (3 passes) instead of 4.
    """

    cond: Denoiser
    uncond: Denoiser
    scale: float = 1.2
    interval: tuple = (-3.0, 5.0)

    def __post_init__(self):
        lo, hi = self.interval
        if not lo < hi:
            raise ValueError(f"guidance interval must satisfy lo < hi, got {self.interval}")

    @property
    def event_shape(self):
        return self.cond.event_shape

    def active(self, noise: NoiseInfo) -> bool:
        lo, hi = self.interval
        return bool(lo <= float(noise.logsnr) <= hi)

    def predict(self, z, noise):
        x_c = self.cond.predict(z, noise)
        if not self.active(noise):
            return x_c
        x_u = self.uncond.predict(z, noise)
        return x_u + self.scale * (x_c - x_u)

    def predict_jvp(self, z, noise, tangent):
        if not self.active(noise):
            return self.cond.predict_jvp(z, noise, tangent)
        x_u = self.uncond.predict(z, noise)  # held constant for the tangent
        x_c, j_c = self.cond.predict_jvp(z, noise, tangent)
        return x_u + self.scale * (x_c - x_u), self.scale * j_c


def guided_predict_jvp(g: GuidedDenoiser, z, n: NoiseInfo, tangent):
    return g.predict_jvp(z, n, tangent)


class EvalCounter:
    """Mutable count of network passes; one per sampler run."""

    def __init__(self):
        self.count = 0


@dataclasses.dataclass(frozen=True, eq=False)
class CountingDenoiser:
    """Charges 1 pass per ``predict`` and 2 per ``predict_jvp`` (primal + tangent)."""

    inner: Denoiser
    counter: EvalCounter

    @property
    def event_shape(self):
        return self.inner.event_shape

    def predict(self, z, noise):
        self.counter.count += 1
        return self.inner.predict(z, noise)

    def predict_jvp(self, z, noise, tangent):
        self.counter.count += 2
        return self.inner.predict_jvp(z, noise, tangent)


def with_counter(handle: Denoiser, counter: EvalCounter) -> Denoiser:
    """Wrap the network leaves of ``handle`` so every pass is charged to ``counter``."""
    if isinstance(handle, GuidedDenoiser):
        return dataclasses.replace(handle, cond=with_counter(handle.cond, counter), uncond=with_counter(handle.uncond, counter))
    return CountingDenoiser(handle, counter)


def expected_passes(handle: Denoiser, noise: NoiseInfo, jvp: bool) -> int:
    """Network passes one ``predict`` / ``predict_jvp`` call costs at ``noise``."""
    if isinstance(handle, GuidedDenoiser):
        base = expected_passes(handle.cond, noise, jvp)
        return base + 1 if handle.active(noise) else base
    return 2 if jvp else 1
