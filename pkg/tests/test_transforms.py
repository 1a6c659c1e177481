import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covsampler import transforms
from covsampler.transforms import (
    BlockDCT,
    ConvDCT,
    Haar,
    Identity,
    LeGall53,
    conv_dct_adjoint,
    conv_dct_forward,
    conv_dct_inverse,
    dct_matrix,
    make_transform,
    wavelet_subbands,
)


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def direct_block_dct(x, b):
    """Reference: loop over blocks and apply D X D^T per block and channel."""
    d = dct_matrix(b, b)
    H, W, C = x.shape
    out = np.zeros((H // b, W // b, b * b, C))
    for i in range(H // b):
        for j in range(W // b):
            for c in range(C):
                blk = x[i * b : (i + 1) * b, j * b : (j + 1) * b, c]
                out[i, j, :, c] = (d @ blk @ d.T).reshape(-1)
    return out


class TestDctMatrix:
    def test_size_one(self):
        np.testing.assert_array_equal(dct_matrix(1, 1), [[1.0]])

    def test_size_two(self):
        r = np.sqrt(0.5)
        np.testing.assert_allclose(dct_matrix(2, 2), [[r, r], [r, -r]], atol=1e-15)

    def test_cosine_formula_unnormalized(self):
        m = dct_matrix(5, 3, norm="none")
        k, n = 2, 3
        assert m.shape == (3, 5)
        assert m[k, n] == pytest.approx(np.cos(np.pi / 5 * (n + 0.5) * k))

    @pytest.mark.parametrize("n", [8, 13, 64])
    def test_orthonormal(self, n):
        d = dct_matrix(n, n)
        assert np.abs(d @ d.T - np.eye(n)).max() < 1e-12

    @pytest.mark.parametrize("args", [(0, 4), (4, 0), (-1, 2)])
    def test_rejects_non_positive(self, args):
        with pytest.raises(ValueError):
            dct_matrix(*args)

    def test_rejects_unknown_norm(self):
        with pytest.raises(ValueError):
            dct_matrix(4, 4, norm="backward")


class TestConvDct:
    def test_output_shape(self):
        y = conv_dct_forward(rand(2, 12, 10, 3), 4)
        assert y.shape == (2, 9, 7, 16, 3)

    def test_block_one_is_identity(self):
        x = rand(5, 6, 2)
        y = conv_dct_forward(x, 1)
        np.testing.assert_array_equal(y, x[..., None, :])
        np.testing.assert_allclose(conv_dct_inverse(y, 1), x, atol=1e-15)

    def test_constant_input(self):
        c = 0.7
        y = conv_dct_forward(np.full((10, 11, 2), c), 8)
        np.testing.assert_allclose(y[..., 0, :], 8 * c, rtol=1e-13)
        assert np.abs(y[..., 1:, :]).max() < 1e-13

    def test_matches_direct_window_transform(self):
        x = rand(11, 9, 2, seed=3)
        d = dct_matrix(4, 4)
        y = conv_dct_forward(x, 4)
        for i, j in [(0, 0), (3, 5), (7, 5)]:
            win = x[i : i + 4, j : j + 4, 1]
            np.testing.assert_allclose(y[i, j, :, 1], (d @ win @ d.T).reshape(-1), atol=1e-13)

    def test_adjoint_identity(self):
        x = rand(2, 9, 10, 3, seed=1)
        y = rand(2, 6, 7, 16, 3, seed=2)
        lhs = np.sum(conv_dct_forward(x, 4) * y)
        rhs = np.sum(x * conv_dct_adjoint(y, 4))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_energy_128(self):
        x = rand(128, 128, 3)
        y = conv_dct_forward(x, 8)
        assert np.mean(y**2) == pytest.approx(np.mean(x**2), rel=5e-3)

    @pytest.mark.parametrize("b", [1, 2, 4, 8])
    def test_round_trip(self, b):
        x = rand(2, 24, 20, 3, seed=b)
        np.testing.assert_allclose(conv_dct_inverse(conv_dct_forward(x, b), b), x, atol=1e-10)

    def test_round_trip_128(self):
        x = rand(128, 128, 3)
        np.testing.assert_allclose(ConvDCT(8).inverse(ConvDCT(8).forward(x)), x, atol=1e-2, rtol=1e-2)

    def test_zero_in_zero_out(self):
        assert not np.any(conv_dct_inverse(np.zeros((3, 3, 16, 2)), 4))

    def test_wrong_frequency_count(self):
        with pytest.raises(ValueError, match="should equal"):
            conv_dct_inverse(np.zeros((3, 3, 15, 1)), 4)

    def test_too_small_image(self):
        with pytest.raises(ValueError):
            conv_dct_forward(rand(7, 9, 1), 8)


class TestBlockDct:
    def test_matches_per_block_oracle(self):
        x = rand(16, 24, 3, seed=4)
        np.testing.assert_allclose(BlockDCT(8).forward(x), direct_block_dct(x, 8), atol=1e-13)

    def test_round_trip_and_energy(self):
        x = rand(3, 16, 16, 2, seed=5)
        t = BlockDCT(4)
        y = t.forward(x)
        assert y.shape == (3, 4, 4, 16, 2)
        assert np.abs(t.inverse(y) - x).max() < 1e-10
        assert abs(np.sum(y**2) - np.sum(x**2)) < 1e-10 * np.sum(x**2)

    def test_block_one(self):
        x = rand(4, 4, 2)
        np.testing.assert_allclose(BlockDCT(1).forward(x), x[..., None, :], atol=1e-15)

    def test_not_divisible(self):
        with pytest.raises(ValueError):
            BlockDCT(8).forward(rand(12, 16, 1))


class TestWavelets:
    def test_haar_two_by_two(self):
        a, b, c, d = 0.0, 1.0, 2.0, 3.0
        x = np.array([[a, b], [c, d]])[:, :, None]
        y = Haar(1).forward(x)[0, 0, :, 0]
        # LL, LH, HL, HH of the orthonormal 2x2 Haar basis
        expected = [(a + b + c + d) / 2, (a - b + c - d) / 2, (a + b - c - d) / 2, (a - b - c + d) / 2]
        np.testing.assert_allclose(y, expected, atol=1e-15)

    @pytest.mark.parametrize("cls", [Haar, LeGall53])
    def test_round_trip(self, cls):
        x = rand(2, 16, 24, 3, seed=6)
        t = cls(3)
        y = t.forward(x)
        assert y.shape == (2, 2, 3, 64, 3)
        assert np.abs(t.inverse(y) - x).max() < 1e-10

    def test_haar_preserves_energy(self):
        x = rand(16, 16, 2, seed=7)
        y = Haar(3).forward(x)
        assert abs(np.sum(y**2) - np.sum(x**2)) < 1e-10 * np.sum(x**2)

    @pytest.mark.parametrize("kind", ["haar", "legall53"])
    def test_constant_has_no_details(self, kind):
        ll, details = wavelet_subbands(np.full((16, 16, 1), 2.5), kind, 3)
        for level in details:
            for band in level:
                assert np.abs(band).max() < 1e-12
        assert np.abs(ll).min() > 0

    def test_not_divisible(self):
        with pytest.raises(ValueError):
            Haar(3).forward(rand(12, 16, 1))


def test_make_transform_names():
    assert isinstance(make_transform("identity"), Identity)
    assert make_transform("convdct", block_size=4) == ConvDCT(4)
    assert make_transform("legall53", levels=2) == LeGall53(2)
    with pytest.raises(ValueError):
        make_transform("fft")


def test_identity_inverse_checks_slot_count():
    with pytest.raises(ValueError, match="should equal"):
        Identity().inverse(np.zeros((4, 4, 2, 1)))


def test_fault_injection_reaches_transforms(monkeypatch):
    real = transforms.dct_matrix
    monkeypatch.setattr(transforms, "dct_matrix", lambda n, k, norm="ortho": 2.0 * real(n, k, norm))
    x = rand(8, 8, 1)
    assert not np.allclose(BlockDCT(8).forward(x), direct_block_dct(x, 8))


ALL = [Identity(), BlockDCT(4), ConvDCT(4), Haar(2), LeGall53(2)]


@settings(max_examples=25, deadline=None)
@given(
    idx=st.integers(0, len(ALL) - 1),
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
    seed=st.integers(0, 2**16),
)
def test_linearity(idx, a, b, seed):
    t = ALL[idx]
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 8, 8, 2))
    lhs = t.forward(a * x + b * y)
    rhs = a * t.forward(x) + b * t.forward(y)
    assert np.abs(lhs - rhs).max() < 1e-10


@settings(max_examples=25, deadline=None)
@given(idx=st.integers(0, len(ALL) - 1), seed=st.integers(0, 2**16), scale=st.floats(1e-3, 1e3))
def test_round_trip_property(idx, seed, scale):
    t = ALL[idx]
    x = scale * np.random.default_rng(seed).normal(size=(8, 12, 2))
    assert np.abs(t.inverse(t.forward(x)) - x).max() < 1e-10 * scale
