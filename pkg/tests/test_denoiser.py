import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from covsampler.denoiser import (
    CountingDenoiser,
    DegenerateMixtureError,
    EvalCounter,
    GaussianMixtureModel,
    GaussianModel,
    GuidedDenoiser,
    MlpDenoiser,
    StationaryGaussianModel,
    expected_passes,
    gaussian_posterior_cov,
    gaussian_posterior_mean,
    gmm_posterior_mean_jvp,
    guided_predict_jvp,
    load_mlp,
    save_mlp,
    train_mlp,
    with_counter,
)
from covsampler.schedule import Cosine
from covsampler.transforms import BlockDCT

COS = Cosine()


def random_gaussian(d=6, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d, d))
    return GaussianModel(mean=rng.normal(size=d), cov=a @ a.T / d + 0.2 * np.eye(d))


def dense_jacobian(handle, z, n):
    d = z.size
    _, cols = handle.predict_jvp(np.broadcast_to(z, (d,) + z.shape), n, np.eye(d).reshape((d,) + z.shape))
    return cols.reshape(d, d).T


def fd_jvp(handle, z, n, u, h=1e-5):
    return (handle.predict(z + h * u, n) - handle.predict(z - h * u, n)) / (2 * h)


class TestGaussian:
    def test_standard_normal_prior_gives_alpha_z(self):
        m = GaussianModel(mean=np.zeros(3), cov=np.eye(3))
        n = COS.noise_info(0.3)
        z = np.array([0.5, -1.0, 2.0])
        np.testing.assert_allclose(gaussian_posterior_mean(z, n, m), n.alpha * z, atol=1e-14)

    def test_closed_form_mean(self):
        m = random_gaussian()
        n = COS.noise_info(0.4)
        z = np.random.default_rng(1).normal(size=6)
        a, s2 = n.alpha, n.sigma**2
        prec = np.linalg.inv(m.cov)
        expected = np.linalg.solve(prec + a**2 / s2 * np.eye(6), prec @ m.mean + a / s2 * z)
        np.testing.assert_allclose(gaussian_posterior_mean(z, n, m), expected, atol=1e-10)

    def test_endpoints(self):
        m = random_gaussian()
        z = np.random.default_rng(2).normal(size=6)
        np.testing.assert_allclose(m.predict(z, COS.noise_info(1.0)), m.mean, atol=1e-14)
        np.testing.assert_allclose(m.predict(z, COS.noise_info(0.0)), z, atol=1e-12)
        near = COS.noise_info(1e-7)
        np.testing.assert_allclose(m.predict(z, near), z / near.alpha, atol=1e-6)

    def test_cov_at_logsnr_zero(self):
        m = GaussianModel(mean=np.zeros(4), cov=np.eye(4))
        np.testing.assert_allclose(gaussian_posterior_cov(COS.noise_info(0.5), m), 0.5 * np.eye(4), atol=1e-14)

    def test_diagonal_cov(self):
        d = np.array([0.1, 1.0, 4.0])
        m = GaussianModel(mean=np.zeros(3), cov=np.diag(d))
        n = COS.noise_info(0.35)
        expected = 1 / (1 / d + n.alpha**2 / n.sigma**2)
        np.testing.assert_allclose(gaussian_posterior_cov(n, m), np.diag(expected), atol=1e-14)
        assert np.abs(gaussian_posterior_cov(COS.noise_info(0.0), m)).max() == 0.0

    def test_tweedie_identity(self):
        m = random_gaussian(8, seed=3)
        rng = np.random.default_rng(4)
        for t in rng.uniform(0.05, 0.95, size=20):
            n = COS.noise_info(t)
            jac = dense_jacobian(m, rng.normal(size=8), n)
            np.testing.assert_allclose(n.sigma**2 / n.alpha * jac, gaussian_posterior_cov(n, m), atol=1e-8)
            np.testing.assert_allclose(jac, m.jacobian(n), atol=1e-12)

    @pytest.mark.parametrize("cov", [np.array([[1.0, 0.5], [0.4, 1.0]]), np.diag([1.0, 0.0])])
    def test_rejects_bad_covariance(self, cov):
        with pytest.raises(ValueError):
            GaussianModel(mean=np.zeros(2), cov=cov)

    def test_sample_moments(self):
        m = random_gaussian(4, seed=5)
        x = m.sample(40000, np.random.default_rng(0))
        np.testing.assert_allclose(x.mean(axis=0), m.mean, atol=0.05)
        assert np.linalg.norm(np.cov(x.T) - m.cov) / np.linalg.norm(m.cov) < 0.03

    def test_logpdf(self):
        from scipy import stats

        m = random_gaussian(3, seed=6)
        x = np.random.default_rng(7).normal(size=(5, 3))
        np.testing.assert_allclose(m.logpdf(x), stats.multivariate_normal(m.mean, m.cov).logpdf(x), rtol=1e-12)


class TestStationary:
    def make(self):
        rng = np.random.default_rng(0)
        spec = rng.uniform(0.1, 2.0, size=(2, 2, 16, 3))
        return StationaryGaussianModel(BlockDCT(4), spec, 0.3, (8, 8, 3))

    def test_matches_dense_gaussian(self):
        m = self.make()
        dense = GaussianModel(mean=m.mean.reshape(-1), cov=m.dense_cov(), event_shape=m.event_shape)
        n = COS.noise_info(0.6)
        rng = np.random.default_rng(1)
        z, u = rng.normal(size=(2, 8, 8, 3))
        x1, j1 = m.predict_jvp(z, n, u)
        x2, j2 = dense.predict_jvp(z, n, u)
        np.testing.assert_allclose(x1, x2, atol=1e-10)
        np.testing.assert_allclose(j1, j2, atol=1e-10)

    def test_posterior_spectrum(self):
        m = self.make()
        n = COS.noise_info(0.6)
        cov = n.sigma**2 / n.alpha * dense_jacobian(m, np.zeros((8, 8, 3)), n)
        # rotate the dense posterior covariance into the model basis
        L = BlockDCT(4).forward(np.eye(192).reshape(192, 8, 8, 3)).reshape(192, 192)
        np.testing.assert_allclose(np.diag(L.T @ cov @ L).reshape(m.spectrum.shape), m.posterior_spectrum(n), atol=1e-12)

    def test_rejects_bad_spectrum(self):
        with pytest.raises(ValueError):
            StationaryGaussianModel(BlockDCT(4), np.ones((2, 2, 16, 2)), 0.0, (8, 8, 3))
        with pytest.raises(ValueError):
            StationaryGaussianModel(BlockDCT(4), np.zeros((2, 2, 16, 3)), 0.0, (8, 8, 3))


def two_d_gmm(seed=0, k=3):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 1.5, size=k)
    return GaussianMixtureModel(w / w.sum(), rng.normal(scale=1.5, size=(k, 2)), rng.uniform(0.3, 0.8, size=k))


class TestMixture:
    def test_single_component_is_gaussian(self):
        mu = np.array([0.4, -1.0])
        gmm = GaussianMixtureModel(np.array([1.0]), mu[None], np.array([0.7]))
        g = GaussianModel(mean=mu, cov=0.49 * np.eye(2))
        n = COS.noise_info(0.45)
        z, u = np.random.default_rng(0).normal(size=(2, 2))
        x1, j1 = gmm_posterior_mean_jvp(z, n, gmm, u)
        x2, j2 = g.predict_jvp(z, n, u)
        np.testing.assert_allclose(x1, x2, atol=1e-12)
        np.testing.assert_allclose(j1, j2, atol=1e-12)

    def test_symmetry_plane(self):
        gmm = GaussianMixtureModel(np.array([0.5, 0.5]), np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([0.5, 0.5]))
        x = gmm.predict(np.array([0.0, 0.8]), COS.noise_info(0.5))
        assert abs(x[0]) < 1e-14

    def test_jvp_matches_finite_differences(self):
        gmm = two_d_gmm()
        rng = np.random.default_rng(1)
        for _ in range(10):
            n = COS.noise_info(rng.uniform(0.1, 0.9))
            z, u = rng.normal(size=(2, 2))
            _, jt = gmm.predict_jvp(z, n, u)
            fd = fd_jvp(gmm, z, n, u, h=1e-4 * max(1.0, np.linalg.norm(z)))
            assert np.linalg.norm(jt - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)

    def test_tweedie_symmetric_psd(self):
        gmm = two_d_gmm(seed=2)
        rng = np.random.default_rng(3)
        for _ in range(10):
            n = COS.noise_info(rng.uniform(0.1, 0.9))
            z = rng.normal(size=2)
            cov = n.sigma**2 / n.alpha * dense_jacobian(gmm, z, n)
            assert np.abs(cov - cov.T).max() < 1e-6
            assert np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() > -1e-6
            np.testing.assert_allclose(cov, gmm.posterior_cov(z, n), atol=1e-10)

    def test_one_dimensional_posterior_by_quadrature(self):
        gmm = GaussianMixtureModel(np.array([0.3, 0.7]), np.array([[-1.0], [1.5]]), np.array([0.4, 0.6]))
        n = COS.noise_info(0.55)
        z = 0.3

        def post(x):
            prior = sum(w * np.exp(-0.5 * ((x - m[0]) / s) ** 2) / s for w, m, s in zip(gmm.weights, gmm.means, gmm.scales))
            return prior * np.exp(-0.5 * ((z - n.alpha * x) / n.sigma) ** 2)

        moments = [integrate.quad(lambda x, k=k: x**k * post(x), -12, 12, epsabs=1e-13)[0] for k in range(3)]
        mean = moments[1] / moments[0]
        var = moments[2] / moments[0] - mean**2
        cov = n.sigma**2 / n.alpha * dense_jacobian(gmm, np.array([z]), n)
        assert gmm.predict(np.array([z]), n)[0] == pytest.approx(mean, abs=1e-8)
        assert cov[0, 0] == pytest.approx(var, abs=1e-4)

    def test_high_logsnr_is_stable(self):
        gmm = two_d_gmm()
        x = gmm.predict(np.array([40.0, -40.0]), COS.noise_info(1e-4))
        assert np.all(np.isfinite(x))

    def test_degenerate_raises(self):
        gmm = two_d_gmm()
        with pytest.raises(DegenerateMixtureError):
            gmm.predict(np.array([np.inf, 0.0]), COS.noise_info(0.5))

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(weights=np.array([0.5, 0.6]), means=np.zeros((2, 2)), scales=np.ones(2)),
            dict(weights=np.array([0.5, 0.5]), means=np.zeros((2, 2)), scales=np.array([1.0, 0.0])),
            dict(weights=np.array([1.0]), means=np.zeros((2, 2)), scales=np.ones(1)),
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            GaussianMixtureModel(**kwargs)


class TestMlp:
    def test_jvp_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for act in ("tanh", "silu"):
            mlp = MlpDenoiser.init((2, 2, 1), (16, 16), rng, activation=act)
            for _ in range(50):
                n = COS.noise_info(rng.uniform(0.05, 0.95))
                z, u = rng.normal(size=(2, 2, 2, 1))
                _, jt = mlp.predict_jvp(z, n, u)
                fd = fd_jvp(mlp, z, n, u)
                assert np.linalg.norm(jt - fd) < 1e-4 * np.linalg.norm(fd)

    def test_zero_tangent(self):
        mlp = MlpDenoiser.init((3,), (8,))
        _, jt = mlp.predict_jvp(np.ones(3), COS.noise_info(0.3), np.zeros(3))
        assert not np.any(jt)

    def test_zero_velocity_network(self):
        mlp = MlpDenoiser.init((3,), (8,))
        mlp = MlpDenoiser([np.zeros_like(w) for w in mlp.weights], [np.zeros_like(b) for b in mlp.biases], (3,))
        n = COS.noise_info(0.3)
        z, u = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, -1.0])
        x, jt = mlp.predict_jvp(z, n, u)
        np.testing.assert_allclose(x, n.alpha * z, atol=1e-15)
        np.testing.assert_allclose(jt, n.alpha * u, atol=1e-15)

    def test_predict_bitwise_equals_jvp_primal(self):
        mlp = MlpDenoiser.init((4,), (8, 8), np.random.default_rng(1))
        z = np.random.default_rng(2).normal(size=(5, 4))
        n = COS.noise_info(0.4)
        assert mlp.predict(z, n).tobytes() == mlp.predict_jvp(z, n, np.ones_like(z))[0].tobytes()

    def test_save_load_round_trip(self, tmp_path):
        mlp = MlpDenoiser.init((2,), (8,), np.random.default_rng(3), activation="silu")
        path = tmp_path / "mlp.npz"
        save_mlp(path, mlp)
        back = load_mlp(path)
        z = np.ones((3, 2))
        n = COS.noise_info(0.5)
        np.testing.assert_array_equal(back.predict(z, n), mlp.predict(z, n))
        assert back.activation == "silu"

    def test_load_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "bad.npz"
        np.savez(path, format=np.array("covsampler-mlp"), version=np.array(99), meta=np.array("{}"))
        with pytest.raises(ValueError, match="version"):
            load_mlp(path)

    def test_training_reduces_loss(self):
        data = np.random.default_rng(0).normal(loc=1.0, scale=0.3, size=(2048, 2))
        untrained = MlpDenoiser.init((2,), (32, 32), np.random.default_rng(0))
        trained = train_mlp(data, hidden=(32, 32), steps=400, seed=0)
        n = COS.noise_info(0.5)
        eps = np.random.default_rng(9).normal(size=data.shape)
        z = n.alpha * data + n.sigma * eps

        def err(m):
            return np.mean((m.predict(z, n) - data) ** 2)

        assert err(trained) < 0.5 * err(untrained)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            MlpDenoiser([np.zeros((4, 3))], [np.zeros(3)], (3,))


class TestGuidance:
    def setup_method(self):
        self.cond = random_gaussian(4, seed=1)
        self.uncond = self.cond.with_mean(np.zeros(4))
        self.z = np.random.default_rng(0).normal(size=4)
        self.u = np.random.default_rng(1).normal(size=4)

    def test_scale_one_is_conditional(self):
        g = GuidedDenoiser(self.cond, self.uncond, scale=1.0)
        n = COS.noise_info(0.5)
        x, jt = guided_predict_jvp(g, self.z, n, self.u)
        x_c, j_c = self.cond.predict_jvp(self.z, n, self.u)
        np.testing.assert_allclose(x, x_c, atol=1e-14)
        np.testing.assert_allclose(jt, j_c, atol=1e-14)

    def test_scale_zero_stops_gradient(self):
        g = GuidedDenoiser(self.cond, self.uncond, scale=0.0)
        n = COS.noise_info(0.5)
        x, jt = g.predict_jvp(self.z, n, self.u)
        np.testing.assert_allclose(x, self.uncond.predict(self.z, n), atol=1e-14)
        assert not np.any(jt)

    def test_outside_interval_is_conditional(self):
        g = GuidedDenoiser(self.cond, self.uncond, scale=1.2, interval=(-3.0, 5.0))
        n = COS.noise_info(0.05)  # logsnr ~ 6.5
        assert not g.active(n)
        np.testing.assert_array_equal(g.predict(self.z, n), self.cond.predict(self.z, n))

    def test_pass_counts(self):
        g = GuidedDenoiser(self.cond, self.uncond, scale=1.2, interval=(-3.0, 5.0))
        for t, jvp, expected in [(0.5, True, 3), (0.5, False, 2), (0.05, True, 2), (0.05, False, 1)]:
            counter = EvalCounter()
            h = with_counter(g, counter)
            n = COS.noise_info(t)
            if jvp:
                h.predict_jvp(self.z, n, self.u)
            else:
                h.predict(self.z, n)
            assert counter.count == expected == expected_passes(g, n, jvp)

    def test_invalid_interval(self):
        with pytest.raises(ValueError):
            GuidedDenoiser(self.cond, self.uncond, interval=(2.0, 1.0))

    def test_counting_wrapper(self):
        c = EvalCounter()
        h = CountingDenoiser(self.cond, c)
        n = COS.noise_info(0.5)
        h.predict(self.z, n)
        h.predict_jvp(self.z, n, self.u)
        assert c.count == 3
        assert h.event_shape == (4,)


HANDLES = [random_gaussian(4, seed=8), two_d_gmm(seed=4), MlpDenoiser.init((4,), (8,), np.random.default_rng(5))]


@settings(max_examples=30, deadline=None)
@given(
    idx=st.integers(0, 2),
    a=st.floats(-2, 2),
    b=st.floats(-2, 2),
    t=st.floats(0.05, 0.95),
    seed=st.integers(0, 2**16),
)
def test_jvp_linear_in_tangent(idx, a, b, t, seed):
    h = HANDLES[idx]
    d = h.event_shape[0]
    rng = np.random.default_rng(seed)
    z, u, v = rng.normal(size=(3, d))
    n = COS.noise_info(t)
    lhs = h.predict_jvp(z, n, a * u + b * v)[1]
    rhs = a * h.predict_jvp(z, n, u)[1] + b * h.predict_jvp(z, n, v)[1]
    assert np.abs(lhs - rhs).max() < 1e-9
    assert h.predict_jvp(z, n, u)[0].tobytes() == h.predict(z, n).tobytes()
