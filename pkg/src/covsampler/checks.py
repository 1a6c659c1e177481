"""Self-verification suite behind ``covsampler verify``.

Each check measures one error quantity and passes when it is at most the
stated tolerance.  Checks look up library functions through their modules, so
monkeypatching (for example ``transforms.dct_matrix``) reaches them.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from . import denoiser, samplers, schedule, transforms, tweedie


@dataclasses.dataclass(frozen=True)
class Check:
    name: str
    tolerance: float
    fn: Callable[[], float]
    what: str


@dataclasses.dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    what: str
    error: str = ""


def _dct_orthonormality() -> float:
    worst = 0.0
    for n in range(1, 65):
        d = transforms.dct_matrix(n, n, norm="ortho")
        worst = max(worst, float(np.max(np.abs(d @ d.T - np.eye(n)))))
    return worst


def _convdct_image():
    return np.random.default_rng(0).normal(size=(128, 128, 3))


def _convdct_energy() -> float:
    x = _convdct_image()
    y = transforms.ConvDCT(8).forward(x)
    return abs(float(np.mean(y**2)) / float(np.mean(x**2)) - 1.0)


def _convdct_roundtrip() -> float:
    x = _convdct_image()
    t = transforms.ConvDCT(8)
    # passes np.allclose(atol=1e-2, rtol=1e-2) iff this is <= atol
    return float(np.max(np.abs(t.inverse(t.forward(x)) - x) - 1e-2 * np.abs(x)))


def _transform_roundtrips() -> float:
    x = np.random.default_rng(1).normal(size=(2, 16, 16, 3))
    worst = 0.0
    for name in ("identity", "blockdct", "haar", "legall53"):
        t = transforms.make_transform(name)
        worst = max(worst, float(np.max(np.abs(t.inverse(t.forward(x)) - x))))
    return worst


def _random_gaussian(rng, d=8):
    a = rng.normal(size=(d, d))
    return denoiser.GaussianModel(mean=rng.normal(size=d), cov=a @ a.T / d + 0.1 * np.eye(d), event_shape=(d,))


def _tweedie_identity() -> float:
    rng = np.random.default_rng(2)
    m = _random_gaussian(rng)
    worst = 0.0
    for _ in range(20):
        n = schedule.Cosine().noise_info(rng.uniform(0.05, 0.95))
        z = rng.normal(size=m.dim)
        _, jac = m.predict_jvp(np.broadcast_to(z, (m.dim, m.dim)), n, np.eye(m.dim))
        cov = tweedie.noise_scale_factor(n.logsnr) * jac.T
        worst = max(worst, float(np.max(np.abs(cov - denoiser.gaussian_posterior_cov(n, m)))))
    return worst


def _exp_family_hessian() -> float:
    rng = np.random.default_rng(3)
    m = _random_gaussian(rng, 4)
    clean = schedule.Cosine().noise_info(0.0)
    worst = 0.0
    for t in (0.3, 0.5, 0.7):
        n = schedule.Cosine().noise_info(t)
        p = tweedie.posterior_exp_family_params(n, clean, prior=m)
        x = rng.normal(size=m.dim)
        h = 1e-3
        eye = np.eye(m.dim) * h
        hess = np.array(
            [
                [(p.F(x + a + b) - p.F(x + a - b) - p.F(x - a + b) + p.F(x - a - b)) / (4 * h * h) for b in eye]
                for a in eye
            ]
        )
        ref = p.lam**2 * denoiser.gaussian_posterior_cov(n, m)
        worst = max(worst, float(np.max(np.abs(hess - ref)) / max(1.0, np.max(np.abs(ref)))))
    return worst


def _hutchinson_scalar() -> float:
    rng = np.random.default_rng(4)
    eps = rng.normal(size=(2, 16, 16, 3))
    worst = 0.0
    for mode in tweedie.AVERAGING_MODES:
        cfg = tweedie.CovEstimatorConfig(averaging=mode)
        for c in (0.0, 0.3, 2.5):
            out = tweedie.frequency_hutchinson(c * eps, eps, cfg)
            worst = max(worst, float(np.max(np.abs(out - np.sqrt(c) * eps))))
    return worst


def _hutchinson_convergence() -> float:
    """Relative error of 5000-probe group variances on a block-diagonal model."""
    rng = np.random.default_rng(5)
    spec = rng.uniform(0.05, 1.0, size=(1, 1, 64, 1))
    m = denoiser.StationaryGaussianModel(transforms.BlockDCT(8), spec, 0.0, (8, 8, 1))
    n = schedule.Cosine().noise_info(0.5)
    cfg = tweedie.CovEstimatorConfig(averaging="channel", transform="blockdct")
    z = rng.normal(size=(5000, 8, 8, 1))
    est = tweedie.estimate_frequency_variances(m, z, n, 1, cfg, rng).var_f.mean(axis=0)
    exact = m.posterior_spectrum(n)
    return float(np.max(np.abs(est - exact) / exact))


def _small_gaussian():
    return denoiser.GaussianModel(mean=np.zeros(16), cov=np.diag(np.linspace(0.1, 1.0, 16)), event_shape=(4, 4, 1))


def _nfe_accounting() -> float:
    m = _small_gaussian()
    g = denoiser.GuidedDenoiser(cond=m.with_mean(np.full(16, 0.1)), uncond=m, scale=1.2, interval=(-3.0, 5.0))
    cfg = tweedie.CovEstimatorConfig(transform="identity")
    expected = {"covaware": (3, 2), "ddim": (2, 1), "ddpm": (2, 1), "addim": (2, 1), "heun": (4, 2), "dpmpp": (4, 2)}
    mismatches = 0
    for kind, (guided_cost, plain_cost) in expected.items():
        spec = samplers.SamplerSpec(kind, cfg if kind == "covaware" else None)
        mismatches += spec.nfe_per_step(True) != guided_cost
        mismatches += spec.nfe_per_step(False) != plain_cost
    plan = samplers.make_plan(12, schedule.Cosine(), guided=True)
    run = samplers.run_sampler(samplers.SamplerSpec("covaware", cfg), g, plan, 0, 4)
    mismatches += run.nfe != 36
    return float(mismatches)


def _degeneracy() -> float:
    m = _small_gaussian()
    plan = samplers.make_plan(16, schedule.Cosine())
    cfg = tweedie.CovEstimatorConfig(first_step_var=0.0, var_cap=0.0, transform="identity")
    a = samplers.run_sampler(samplers.SamplerSpec("covaware", cfg), m, plan, 7, 32).samples
    b = samplers.run_sampler("ddim", m, plan, 7, 32).samples
    return float(a.tobytes() != b.tobytes())


def _mlp_jvp() -> float:
    rng = np.random.default_rng(6)
    mlp = denoiser.MlpDenoiser.init((3,), (16, 16), rng)
    worst = 0.0
    for _ in range(50):
        n = schedule.Cosine().noise_info(rng.uniform(0.05, 0.95))
        z, u = rng.normal(size=3), rng.normal(size=3)
        _, jt = mlp.predict_jvp(z, n, u)
        h = 1e-5
        fd = (mlp.predict(z + h * u, n) - mlp.predict(z - h * u, n)) / (2 * h)
        worst = max(worst, float(np.linalg.norm(jt - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst


def _matched_streams() -> float:
    m = _small_gaussian()
    plan = samplers.make_plan(6, schedule.Cosine())
    cfg = tweedie.CovEstimatorConfig(transform="identity", first_step=False)
    runs = [
        samplers.run_sampler(samplers.SamplerSpec("covaware", cfg), m, plan, 3, 300),
        samplers.run_sampler("ddpm", m, plan, 3, 300),
    ]
    a, b = (r.stream_digests for r in runs)
    shared = set(a) & set(b)
    return float(len(shared) != plan.steps + 1 or any(a[k] != b[k] for k in shared))


CHECKS = (
    Check("dct-orthonormality", 1e-10, _dct_orthonormality, "max |D D^T - I|, n = 1..64"),
    Check("convdct-energy", 5e-3, _convdct_energy, "relative mean-square change, 128x128x3"),
    Check("convdct-roundtrip", 1e-2, _convdct_roundtrip, "max |err| - 1e-2 |x| (allclose, atol 1e-2)"),
    Check("transform-roundtrip", 1e-10, _transform_roundtrips, "max abs error, identity/blockdct/haar/legall53"),
    Check("tweedie-identity", 1e-8, _tweedie_identity, "max |(s^2/a) J - Cov|, 20 points"),
    Check("exp-family-hessian", 1e-4, _exp_family_hessian, "finite-difference Hessian of F vs lam^2 Cov"),
    Check("hutchinson-scalar", 1e-10, _hutchinson_scalar, "max |out - sqrt(c) eps| for J = c I"),
    Check("hutchinson-convergence", 0.1, _hutchinson_convergence, "max relative error, 5000 probes"),
    Check("nfe-accounting", 0.0, _nfe_accounting, "mismatching per-step or total NFE counts"),
    Check("degeneracy-ddim", 0.0, _degeneracy, "covaware(var 0) differs bitwise from DDIM"),
    Check("mlp-jvp", 1e-4, _mlp_jvp, "relative error vs central differences"),
    Check("matched-streams", 0.0, _matched_streams, "per-sample noise streams differ across samplers"),
)


def run_checks(checks=CHECKS) -> list[CheckResult]:
    results = []
    for c in checks:
        try:
            value = float(c.fn())
            passed = bool(np.isfinite(value) and value <= c.tolerance)
            results.append(CheckResult(c.name, passed, value, c.tolerance, c.what))
        except Exception as e:  # a crashing check is a failing check
            results.append(CheckResult(c.name, False, float("nan"), c.tolerance, c.what, f"{type(e).__name__}: {e}"))
    return results
