"""Orthonormal Daubechies filter banks and periodic discrete wavelet transforms.

Conventions
-----------
Analysis correlates with the decomposition filters and keeps even phases::

    approx[k] = sum_n dec_lo[n] * x[(2k + n) mod N]
    detail[k] = sum_n dec_hi[n] * x[(2k + n) mod N]

with ``dec_hi[n] = (-1)**n * dec_lo[L-1-n]``.  Synthesis filters are the
time reversals of the analysis filters, and the synthesis phase is offset by
``L - 1`` so that the round trip is the identity.  With periodic extension
the analysis operator is orthogonal, so its inverse is also its adjoint;
the autodiff rules exploit this.

In 2D, rows (the W axis) are transformed first, then columns (the H axis).
Band names give the filter along W first, then along H: ``LH`` is low-pass
across columns and high-pass down rows (horizontal edges), ``HL`` the
reverse.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor import DTYPE, Tensor, concat, narrow

# Daubechies low-pass filters, extremal phase, computed by spectral
# factorisation at 40 digits.  Ordered so that db2 starts with (1+sqrt3)/(4 sqrt2).
_DEC_LO = {
    "haar": (
        0.7071067811865475244,
        0.7071067811865475244,
    ),
    "db2": (
        0.48296291314453414337,
        0.83651630373780790558,
        0.22414386804201338103,
        -0.12940952255126038117,
    ),
    "db4": (
        0.23037781330889650086,
        0.71484657055291564709,
        0.63088076792985890788,
        -0.027983769416859854211,
        -0.18703481171909308408,
        0.030841381835560763627,
        0.032883011666885199735,
        -0.010597401785069032105,
    ),
}

_VANISHING_MOMENTS = {"haar": 1, "db2": 2, "db4": 4}


@dataclass(frozen=True)
class WaveletFilter:
    """Analysis/synthesis quadruple of an orthonormal two-channel filter bank."""

    name: str
    dec_lo: tuple[float, ...]
    dec_hi: tuple[float, ...] = field(init=False)
    rec_lo: tuple[float, ...] = field(init=False)
    rec_hi: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        lo = tuple(float(c) for c in self.dec_lo)
        n = len(lo)
        if n < 2 or n % 2:
            raise ValueError(f"filter length must be even and >= 2, got {n}")
        hi = tuple((-1) ** k * lo[n - 1 - k] for k in range(n))
        object.__setattr__(self, "dec_lo", lo)
        object.__setattr__(self, "dec_hi", hi)
        object.__setattr__(self, "rec_lo", lo[::-1])
        object.__setattr__(self, "rec_hi", hi[::-1])

    def __len__(self) -> int:
        return len(self.dec_lo)


def analysis_matrix(f: WaveletFilter, n: int) -> np.ndarray:
    """Dense float64 ``n x n`` periodic analysis operator (approx rows first)."""
    if n % 2:
        raise DimensionError(f"analysis matrix size must be even, got {n}")
    a = np.zeros((n, n))
    for k in range(n // 2):
        for j, (lo, hi) in enumerate(zip(f.dec_lo, f.dec_hi)):
            a[k, (2 * k + j) % n] += lo
            a[n // 2 + k, (2 * k + j) % n] += hi
    return a


def check_filter(f: WaveletFilter, moments: int = 1, tol: float = 1e-6) -> None:
    """Raise ``ValueError`` if ``f`` is not an orthonormal QMF pair with the given moments."""
    lo = np.array(f.dec_lo)
    hi = np.array(f.dec_hi)
    problems = []
    if abs(lo.sum() - math.sqrt(2)) > tol:
        problems.append(f"sum(dec_lo) = {lo.sum()!r}")
    if abs((lo**2).sum() - 1) > tol:
        problems.append(f"sum(dec_lo**2) = {(lo**2).sum()!r}")
    taps = np.arange(len(lo), dtype=float)
    for k in range(moments):
        m = float((taps**k * hi).sum())
        if abs(m) > tol:
            problems.append(f"moment {k} of dec_hi = {m!r}")
    a = analysis_matrix(f, 2 * len(lo))
    dev = np.abs(a.T @ a - np.eye(len(a))).max()
    if dev > tol:
        problems.append(f"analysis matrix deviates from orthogonal by {dev!r}")
    if problems:
        raise ValueError(f"wavelet {f.name!r} failed validation: " + "; ".join(problems))


_FILTERS: dict[str, WaveletFilter] = {}
for _name, _lo in _DEC_LO.items():
    _FILTERS[_name] = WaveletFilter(_name, _lo)
    check_filter(_FILTERS[_name], _VANISHING_MOMENTS[_name])

WAVELETS = tuple(_FILTERS)


def wavelet_filters(name: str) -> WaveletFilter:
    """Look up ``haar``, ``db2`` (4 taps) or ``db4`` (8 taps)."""
    try:
        return _FILTERS[name]
    except KeyError:
        raise KeyError(f"unknown wavelet {name!r}; choose from {', '.join(WAVELETS)}") from None


def _as_filter(f) -> WaveletFilter:
    return f if isinstance(f, WaveletFilter) else wavelet_filters(f)


# ---------------------------------------------------------------------------
# array kernels along the last axis


def _analyse(x: np.ndarray, f: WaveletFilter) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[-1]
    taps = len(f)
    ext = np.take(x, np.arange(n + taps - 2) % n, axis=-1)
    lo = np.zeros(x.shape[:-1] + (n // 2,), dtype=x.dtype)
    hi = np.zeros_like(lo)
    for j in range(taps):
        window = ext[..., j:j + n - 1:2]
        lo += x.dtype.type(f.dec_lo[j]) * window
        hi += x.dtype.type(f.dec_hi[j]) * window
    return lo, hi


def _synthesise(lo: np.ndarray, hi: np.ndarray, f: WaveletFilter) -> np.ndarray:
    half = lo.shape[-1]
    n = 2 * half
    taps = len(f)
    ext = np.zeros(lo.shape[:-1] + (n + taps - 2,), dtype=lo.dtype)
    for j in range(taps):
        # rec filters are reversed dec filters; tap j lands at phase L-1-j
        r = taps - 1 - j
        ext[..., j:j + n - 1:2] += lo.dtype.type(f.rec_lo[r]) * lo + lo.dtype.type(f.rec_hi[r]) * hi
    out = ext[..., :n].copy()
    for start in range(n, ext.shape[-1], n):
        chunk = ext[..., start:start + n]
        out[..., :chunk.shape[-1]] += chunk
    return out


def _check_even(n: int, what: str) -> None:
    if n % 2 or n == 0:
        raise DimensionError(f"{what}: length must be even and positive, got {n}")


# ---------------------------------------------------------------------------
# 1D public API (plain arrays)


def dwt1d_periodic(x, f) -> tuple[np.ndarray, np.ndarray]:
    """One analysis level of a 1D signal; returns ``(approx, detail)``."""
    f = _as_filter(f)
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 1:
        raise DimensionError(f"dwt1d_periodic expects a vector, got shape {x.shape}")
    _check_even(len(x), "dwt1d_periodic")
    return _analyse(x, f)


def idwt1d_periodic(approx, detail, f) -> np.ndarray:
    """Inverse of :func:`dwt1d_periodic`."""
    f = _as_filter(f)
    approx = np.asarray(approx, dtype=DTYPE)
    detail = np.asarray(detail, dtype=DTYPE)
    if approx.shape != detail.shape or approx.ndim != 1:
        raise DimensionError(f"idwt1d_periodic: band shapes {approx.shape} and {detail.shape} differ")
    return _synthesise(approx, detail, f)


# ---------------------------------------------------------------------------
# differentiable tensor ops; bands are packed [approx | detail] along ``axis``


@functools.lru_cache(maxsize=32)
def _packed_operator(f: WaveletFilter, n: int) -> np.ndarray:
    op = analysis_matrix(f, n).astype(DTYPE)
    op.flags.writeable = False
    return op


def _apply_along(op: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    """``op @ v`` for every 1D fibre ``v`` of ``x`` along ``axis``."""
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        return x @ op.T
    if axis == x.ndim - 2:
        return np.matmul(op, x)
    return np.moveaxis(np.moveaxis(x, axis, -1) @ op.T, -1, axis)


# The tensor ops apply the dense periodic operator with one GEMM per axis:
# for image-sized fibres this beats the per-tap strided loop several times over.
def _analyse_packed(x: np.ndarray, f: WaveletFilter, axis: int) -> np.ndarray:
    return _apply_along(_packed_operator(f, x.shape[axis]), x, axis)


def _synthesise_packed(y: np.ndarray, f: WaveletFilter, axis: int) -> np.ndarray:
    return _apply_along(_packed_operator(f, y.shape[axis]).T, y, axis)


def dwt_axis(x: Tensor, f, axis: int) -> Tensor:
    """One analysis level along ``axis``; approx and detail are packed side by side."""
    f = _as_filter(f)
    _check_even(x.shape[axis], "dwt_axis")
    out = _analyse_packed(x.data, f, axis)
    return Tensor._from_op(out, (x,), lambda g: (_synthesise_packed(g, f, axis),), "dwt_axis")


def idwt_axis(y: Tensor, f, axis: int) -> Tensor:
    """Inverse of :func:`dwt_axis`."""
    f = _as_filter(f)
    _check_even(y.shape[axis], "idwt_axis")
    out = _synthesise_packed(y.data, f, axis)
    return Tensor._from_op(out, (y,), lambda g: (_analyse_packed(g, f, axis),), "idwt_axis")


def dwt2d(x: Tensor, f) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Single-level separable 2D DWT of a (B, C, H, W) tensor.

    Returns:
        ``(LL, LH, HL, HH)``, each of shape (B, C, H/2, W/2).
    """
    if x.ndim != 4:
        raise DimensionError(f"dwt2d expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"dwt2d: spatial dims must be even, got {H}x{W}")
    y = dwt_axis(dwt_axis(x, f, axis=3), f, axis=2)
    h, w = H // 2, W // 2
    top, bottom = narrow(y, 2, 0, h), narrow(y, 2, h, H)
    return (narrow(top, 3, 0, w), narrow(bottom, 3, 0, w), narrow(top, 3, w, W), narrow(bottom, 3, w, W))


def idwt2d(ll: Tensor, lh: Tensor, hl: Tensor, hh: Tensor, f) -> Tensor:
    """Inverse of :func:`dwt2d`."""
    shapes = {t.shape for t in (ll, lh, hl, hh)}
    if len(shapes) != 1 or ll.ndim != 4:
        raise DimensionError(f"idwt2d: bands must share one (B, C, h, w) shape, got {sorted(shapes)}")
    packed = concat((concat((ll, hl), axis=3), concat((lh, hh), axis=3)), axis=2)
    return idwt_axis(idwt_axis(packed, f, axis=2), f, axis=3)


@dataclass
class CoeffPyramid:
    """Multilevel 2D decomposition.

    ``details[l - 1]`` holds the ``(LH, HL, HH)`` bands produced at level
    ``l``; level 1 is the finest.  ``approx`` is the level-``levels`` LL band.
    """

    levels: int
    approx: Tensor
    details: list[tuple[Tensor, Tensor, Tensor]]

    def bands(self):
        yield self.approx
        for triple in self.details:
            yield from triple

    def energy(self) -> float:
        return float(sum(np.sum(b.data.astype(np.float64) ** 2) for b in self.bands()))


def wavedec2(x: Tensor, f, levels: int) -> CoeffPyramid:
    """Mallat decomposition: repeat :func:`dwt2d` on the LL band ``levels`` times."""
    if levels < 1:
        raise DimensionError(f"wavedec2: levels must be >= 1, got {levels}")
    if x.ndim != 4:
        raise DimensionError(f"wavedec2 expects (B, C, H, W), got {x.shape}")
    H, W = x.shape[2:]
    step = 2**levels
    if H % step or W % step:
        raise DimensionError(f"wavedec2: {H}x{W} is not divisible by 2**{levels}")
    f = _as_filter(f)
    details = []
    approx = x
    for _ in range(levels):
        approx, lh, hl, hh = dwt2d(approx, f)
        details.append((lh, hl, hh))
    return CoeffPyramid(levels, approx, details)


def waverec2(p: CoeffPyramid, f) -> Tensor:
    """Inverse of :func:`wavedec2`."""
    f = _as_filter(f)
    approx = p.approx
    for lh, hl, hh in reversed(p.details):
        approx = idwt2d(approx, lh, hl, hh, f)
    return approx
