"""Orthonormal frequency transforms for images laid out as ``[*B, H, W, C]``.

Every transform maps a spatial array to a frequency array of shape
``[*B, h, w, F, C]``: ``(h, w)`` index a spatial position (block, window or
wavelet tile), ``F`` indexes the frequency component at that position and the
channel axis is carried through untouched.  The covariance estimator only
reduces over groups of these axes, so any transform exposing this layout can be
plugged into it.
"""

from __future__ import annotations

import dataclasses
import functools
from typing import Protocol

import numpy as np


class Transform(Protocol):
    def forward(self, x: np.ndarray) -> np.ndarray: ...

    def inverse(self, y: np.ndarray) -> np.ndarray: ...


def dct_matrix(num_n: int, num_k: int, norm: str = "ortho") -> np.ndarray:
    """DCT-II matrix of shape ``[num_k, num_n]``.

    Entry ``(k, n)`` is ``cos(pi / num_n * (n + 0.5) * k)``.  With
    ``norm="ortho"`` row 0 is scaled by ``1/sqrt(num_n)`` and the other rows by
    ``sqrt(2/num_n)``, which makes the square matrix orthonormal.
    """
    if num_n < 1 or num_k < 1:
        raise ValueError(f"DCT sizes must be positive, got {num_n=}, {num_k=}")
    if norm not in ("ortho", "none"):
        raise ValueError(f"unknown norm {norm!r}")
    n = np.arange(num_n)[None, :]
    k = np.arange(num_k)[:, None]
    mat = np.cos(np.pi / num_n * (n + 0.5) * k)
    if norm == "ortho":
        scale = np.full(num_k, np.sqrt(2.0 / num_n))
        scale[0] = 1.0 / np.sqrt(num_n)
        mat = mat * scale[:, None]
    return mat


def _check_image(x: np.ndarray) -> None:
    if x.ndim < 3:
        raise ValueError(f"expected an array of shape [*B, H, W, C], got {x.shape}")


def _ortho_dct(block_size: int) -> np.ndarray:
    # looked up through the module so fault injection in tests reaches every user
    return dct_matrix(block_size, block_size, norm="ortho")


# ---------------------------------------------------------------------------
# ConvDCT: stride-1 sliding DCT with a normalized-adjoint inverse


def conv_dct_forward(x: np.ndarray, block_size: int) -> np.ndarray:
    """Slide the ``b x b`` separable DCT over each channel ("VALID" padding).

    Returns ``[*B, H-b+1, W-b+1, b*b, C]`` with the frequency axis ordered
    row-major over ``(k_row, k_col)``.
    """
    x = np.asarray(x, dtype=float)
    _check_image(x)
    b = block_size
    if b < 1:
        raise ValueError(f"block_size must be >= 1, got {b}")
    H, W = x.shape[-3], x.shape[-2]
    if H < b or W < b:
        raise ValueError(f"spatial dims {(H, W)} smaller than block_size {b}")
    dct = _ortho_dct(b)
    h, w = H - b + 1, W - b + 1
    # windows along H: [*B, h, W, C, u] @ D^T -> [*B, h, W, C, kr]
    rows = np.stack([x[..., u : u + h, :, :] for u in range(b)], axis=-1) @ dct.T
    # windows along W: [*B, h, w, C, kr, v] @ D^T -> [*B, h, w, C, kr, kc]
    both = np.stack([rows[..., v : v + w, :, :] for v in range(b)], axis=-1) @ dct.T
    both = np.moveaxis(both, -3, -1)  # [*B, h, w, kr, kc, C]
    return both.reshape(both.shape[:-3] + (b * b, x.shape[-1]))


def conv_dct_adjoint(y: np.ndarray, block_size: int) -> np.ndarray:
    """Transpose of :func:`conv_dct_forward` (a transposed convolution)."""
    y = np.asarray(y, dtype=float)
    b = block_size
    if y.ndim < 4:
        raise ValueError(f"expected an array of shape [*B, h, w, F, C], got {y.shape}")
    if y.shape[-2] != b * b:
        raise ValueError(f"frequency dim {y.shape[-2]} should equal {b * b}")
    dct = _ortho_dct(b)
    h, w, C = y.shape[-4], y.shape[-3], y.shape[-1]
    batch = y.shape[:-4]
    y = y.reshape(batch + (h, w, b, b, C))
    # undo the column DCT: [*B, h, w, kr, v, C], then scatter windows along W
    t = np.moveaxis(np.moveaxis(y, -1, -3) @ dct, -3, -1)  # [*B, h, w, kr, v, C]
    cols = np.zeros(batch + (h, w + b - 1, b, C))
    for v in range(b):
        cols[..., :, v : v + w, :, :] += t[..., :, :, :, v, :]
    # undo the row DCT: [*B, h, W, u, C], then scatter along H
    t = np.moveaxis(np.moveaxis(cols, -1, -2) @ dct, -1, -2)  # [*B, h, W, u, C]
    out = np.zeros(batch + (h + b - 1, w + b - 1, C))
    for u in range(b):
        out[..., u : u + h, :, :] += t[..., :, :, u, :]
    return out


@functools.lru_cache(maxsize=32)
def _overlap_normalization(height: int, width: int, block_size: int) -> np.ndarray:
    ones = np.ones((height, width, 1))
    norm = conv_dct_adjoint(conv_dct_forward(ones, block_size), block_size)
    norm.setflags(write=False)
    return norm


def conv_dct_inverse(y: np.ndarray, block_size: int) -> np.ndarray:
    """Invert :func:`conv_dct_forward`.

    The adjoint of the forward map, divided by the adjoint applied to the
    forward map of an all-ones image.  Each pixel is covered by several windows
    and the full DCT basis reconstructs each window, so this normalization
    recovers the input exactly up to rounding.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim >= 2 and y.shape[-2] != block_size * block_size:
        raise ValueError(f"frequency dim {y.shape[-2]} should equal {block_size**2}")
    out = conv_dct_adjoint(y, block_size)
    return out / _overlap_normalization(out.shape[-3], out.shape[-2], block_size)


# ---------------------------------------------------------------------------
# Block DCT on non-overlapping tiles


def _check_divisible(x: np.ndarray, factor: int) -> None:
    H, W = x.shape[-3], x.shape[-2]
    if H % factor or W % factor:
        raise ValueError(f"spatial dims {(H, W)} not divisible by {factor}")


def block_dct_forward(x: np.ndarray, block_size: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _check_image(x)
    b = block_size
    if b < 1:
        raise ValueError(f"block_size must be >= 1, got {b}")
    _check_divisible(x, b)
    H, W, C = x.shape[-3:]
    batch = x.shape[:-3]
    dct = _ortho_dct(b)
    tiles = x.reshape(batch + (H // b, b, W // b, b, C))
    tiles = np.moveaxis(tiles, (-5, -3, -1, -2, -4), (-5, -4, -3, -2, -1))  # [*B, h, w, C, v, u]
    y = dct @ (tiles @ dct.T)  # [*B, h, w, C, kc, kr]
    y = np.moveaxis(y, (-3, -2, -1), (-1, -2, -3))  # [*B, h, w, kr, kc, C]
    return y.reshape(batch + (H // b, W // b, b * b, C))


def block_dct_inverse(y: np.ndarray, block_size: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    b = block_size
    if y.ndim < 4:
        raise ValueError(f"expected an array of shape [*B, h, w, F, C], got {y.shape}")
    if y.shape[-2] != b * b:
        raise ValueError(f"frequency dim {y.shape[-2]} should equal {b * b}")
    h, w, C = y.shape[-4], y.shape[-3], y.shape[-1]
    batch = y.shape[:-4]
    dct = _ortho_dct(b)
    coeffs = y.reshape(batch + (h, w, b, b, C))
    coeffs = np.moveaxis(coeffs, (-3, -2, -1), (-1, -2, -3))  # [*B, h, w, C, kc, kr]
    x = dct.T @ (coeffs @ dct)  # [*B, h, w, C, v, u]
    x = np.moveaxis(x, (-5, -1, -4, -2, -3), (-5, -4, -3, -2, -1))  # [*B, h, u, w, v, C]
    return x.reshape(batch + (h * b, w * b, C))


# ---------------------------------------------------------------------------
# Wavelets (Haar and LeGall 5/3 lifting), packed into tiles of 4**levels slots


def _haar_split(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    even = np.take(x, np.arange(0, x.shape[axis], 2), axis=axis)
    odd = np.take(x, np.arange(1, x.shape[axis], 2), axis=axis)
    return (even + odd) / np.sqrt(2.0), (even - odd) / np.sqrt(2.0)


def _haar_merge(lo: np.ndarray, hi: np.ndarray, axis: int) -> np.ndarray:
    even = (lo + hi) / np.sqrt(2.0)
    odd = (lo - hi) / np.sqrt(2.0)
    return _interleave(even, odd, axis)


def _interleave(even: np.ndarray, odd: np.ndarray, axis: int) -> np.ndarray:
    shape = list(even.shape)
    shape[axis] *= 2
    out = np.empty(shape, dtype=np.result_type(even, odd))
    idx = [slice(None)] * even.ndim
    idx[axis] = slice(0, None, 2)
    out[tuple(idx)] = even
    idx[axis] = slice(1, None, 2)
    out[tuple(idx)] = odd
    return out


def _shift(a: np.ndarray, axis: int, step: int) -> np.ndarray:
    """Neighbour along ``axis`` with symmetric (whole-point) boundary extension.

    ``step=+1`` returns ``a[i+1]`` (last entry repeated), ``step=-1`` returns
    ``a[i-1]`` (first entry repeated).  On the even/odd polyphase components of
    a signal this is exactly the whole-point mirror ``x[-1] = x[1]``,
    ``x[N] = x[N-2]``.
    """
    n = a.shape[axis]
    if step > 0:
        idx = np.minimum(np.arange(n) + 1, n - 1)
    else:
        idx = np.maximum(np.arange(n) - 1, 0)
    return np.take(a, idx, axis=axis)


def _legall_split(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    s = np.take(x, np.arange(0, x.shape[axis], 2), axis=axis)
    d = np.take(x, np.arange(1, x.shape[axis], 2), axis=axis)
    d = d - 0.5 * (s + _shift(s, axis, +1))
    s = s + 0.25 * (_shift(d, axis, -1) + d)
    # unit-gain normalization so subband energies are comparable with Haar
    return s * np.sqrt(2.0), d / np.sqrt(2.0)


def _legall_merge(lo: np.ndarray, hi: np.ndarray, axis: int) -> np.ndarray:
    s = lo / np.sqrt(2.0)
    d = hi * np.sqrt(2.0)
    s = s - 0.25 * (_shift(d, axis, -1) + d)
    d = d + 0.5 * (s + _shift(s, axis, +1))
    return _interleave(s, d, axis)


_WAVELETS = {
    "haar": (_haar_split, _haar_merge),
    "legall53": (_legall_split, _legall_merge),
}


def wavelet_subbands(x: np.ndarray, kind: str, levels: int) -> tuple[np.ndarray, list]:
    """Multi-level 2-D decomposition in the usual pyramid form.

    Returns ``(ll, details)`` where ``details[j]`` holds the ``(LH, HL, HH)``
    bands of level ``j + 1`` (finest first).  The first letter refers to the
    filter applied along H.
    """
    split, _ = _WAVELETS[kind]
    x = np.asarray(x, dtype=float)
    _check_image(x)
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    _check_divisible(x, 2**levels)
    details = []
    ll = x
    for _ in range(levels):
        lo, hi = split(ll, axis=-3)
        ll, lh = split(lo, axis=-2)
        hl, hh = split(hi, axis=-2)
        details.append((lh, hl, hh))
    return ll, details


def wavelet_from_subbands(ll: np.ndarray, details: list, kind: str) -> np.ndarray:
    _, merge = _WAVELETS[kind]
    for lh, hl, hh in reversed(details):
        lo = merge(ll, lh, axis=-2)
        hi = merge(hl, hh, axis=-2)
        ll = merge(lo, hi, axis=-3)
    return ll


def _pack(band: np.ndarray, m: int) -> np.ndarray:
    # [*B, h*m, w*m, C] -> [*B, h, w, m*m, C]
    hm, wm, C = band.shape[-3:]
    batch = band.shape[:-3]
    t = band.reshape(batch + (hm // m, m, wm // m, m, C))
    t = np.moveaxis(t, -4, -3)  # [*B, h, w, m, m, C]
    return t.reshape(batch + (hm // m, wm // m, m * m, C))


def _unpack(slots: np.ndarray, m: int) -> np.ndarray:
    h, w, _, C = slots.shape[-4:]
    batch = slots.shape[:-4]
    t = slots.reshape(batch + (h, w, m, m, C))
    t = np.moveaxis(t, -3, -4)  # [*B, h, m, w, m, C]
    return t.reshape(batch + (h * m, w * m, C))


def wavelet_forward(x: np.ndarray, kind: str, levels: int) -> np.ndarray:
    """Wavelet decomposition packed as ``[*B, H/2**L, W/2**L, 4**L, C]``.

    Each ``2**L x 2**L`` tile owns one coarse approximation coefficient and the
    detail coefficients of every level that sit under it, so 3 levels give the
    same 64 slots per position as an 8x8 DCT.  Slot order: LL, then levels
    from coarsest to finest, bands LH, HL, HH, coefficients row-major.
    """
    ll, details = wavelet_subbands(x, kind, levels)
    parts = [ll[..., None, :]]
    for j in range(levels, 0, -1):
        m = 2 ** (levels - j)
        parts.extend(_pack(band, m) for band in details[j - 1])
    return np.concatenate(parts, axis=-2)


def wavelet_inverse(y: np.ndarray, kind: str, levels: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim < 4 or y.shape[-2] != 4**levels:
        raise ValueError(f"frequency dim {y.shape[-2:-1]} should equal {4**levels}")
    ll = y[..., 0, :]
    details: list = [None] * levels
    pos = 1
    for j in range(levels, 0, -1):
        m = 2 ** (levels - j)
        bands = []
        for _ in range(3):
            bands.append(_unpack(y[..., pos : pos + m * m, :], m))
            pos += m * m
        details[j - 1] = tuple(bands)
    return wavelet_from_subbands(ll, details, kind)


# ---------------------------------------------------------------------------
# Transform objects


@dataclasses.dataclass(frozen=True)
class Identity:
    """Pixel basis; one frequency slot per position."""

    name = "identity"

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        _check_image(x)
        return x[..., None, :]

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[-2] != 1:
            raise ValueError(f"frequency dim {y.shape[-2]} should equal 1")
        return y[..., 0, :]


@dataclasses.dataclass(frozen=True)
class BlockDCT:
    block_size: int = 8
    name = "blockdct"

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def forward(self, x):
        return block_dct_forward(x, self.block_size)

    def inverse(self, y):
        return block_dct_inverse(y, self.block_size)


@dataclasses.dataclass(frozen=True)
class ConvDCT:
    """Sliding-window DCT; see :func:`conv_dct_forward`."""

    block_size: int = 8
    name = "convdct"

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def forward(self, x):
        return conv_dct_forward(x, self.block_size)

    def inverse(self, y):
        return conv_dct_inverse(y, self.block_size)


@dataclasses.dataclass(frozen=True)
class Haar:
    levels: int = 3
    name = "haar"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")

    def forward(self, x):
        return wavelet_forward(x, "haar", self.levels)

    def inverse(self, y):
        return wavelet_inverse(y, "haar", self.levels)


@dataclasses.dataclass(frozen=True)
class LeGall53:
    levels: int = 3
    name = "legall53"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")

    def forward(self, x):
        return wavelet_forward(x, "legall53", self.levels)

    def inverse(self, y):
        return wavelet_inverse(y, "legall53", self.levels)


TRANSFORM_NAMES = ("identity", "blockdct", "convdct", "haar", "legall53")


def make_transform(name: str, block_size: int = 8, levels: int = 3) -> Transform:
    name = name.lower()
    if name == "identity":
        return Identity()
    if name == "blockdct":
        return BlockDCT(block_size)
    if name == "convdct":
        return ConvDCT(block_size)
    if name == "haar":
        return Haar(levels)
    if name == "legall53":
        return LeGall53(levels)
    raise ValueError(f"unknown transform {name!r}; expected one of {TRANSFORM_NAMES}")
