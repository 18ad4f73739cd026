"""Periodic 2D orthonormal Daubechies wavelet transform on ``2**J`` grids.

Coefficients use the standard in-place Mallat layout: after a full ``J``-level
decomposition the coarse coefficient sits at ``[0, 0]`` and the three detail
blocks of the level with ``2**(j-1)`` coefficients per side occupy
``[0:s, s:2s]`` (horizontal), ``[s:2s, 0:s]`` (vertical) and ``[s:2s, s:2s]``
(diagonal) with ``s = 2**(j-1)``. Scale index ``j`` runs from 0 (coarse) to
``J`` (finest details).
"""

from __future__ import annotations

from functools import lru_cache

import mpmath
import numba
import numpy as np


@lru_cache(maxsize=None)
def daubechies_filter(order: int) -> np.ndarray:
    """Scaling (low-pass) filter of the Daubechies wavelet with ``order`` vanishing moments.

    Built by spectral factorization of the Daubechies polynomial in 50-digit
    arithmetic, keeping the roots inside the unit circle (minimum phase).
    Normalized so that the taps sum to ``sqrt(2)``.
    """
    if not 1 <= order <= 10:
        raise ValueError("Daubechies order must be in 1..10")
    with mpmath.workdps(50):
        n = order
        # P(y) = sum_k C(n-1+k, k) y^k with y = sin^2(w/2) = (2 - z - 1/z) / 4
        poly = [mpmath.binomial(n - 1 + k, k) for k in range(n)]
        roots_y = mpmath.polyroots(poly[::-1], maxsteps=200, extraprec=200) if n > 1 else []
        zs = []
        for y in roots_y:
            # z + 1/z = 2 - 4y
            b = 2 - 4 * y
            disc = mpmath.sqrt(b * b - 4)
            z1 = (b + disc) / 2
            z2 = (b - disc) / 2
            zs.append(z1 if abs(z1) < 1 else z2)
        coeffs = [mpmath.mpc(1)]
        for _ in range(n):
            coeffs = _polymul(coeffs, [mpmath.mpc(1), mpmath.mpc(1)])
        for z in zs:
            coeffs = _polymul(coeffs, [mpmath.mpc(1), -z])
        real = [mpmath.re(c) for c in coeffs]
        total = mpmath.fsum(real)
        h = [c * mpmath.sqrt(2) / total for c in real]
        out = np.array([float(c) for c in h])
    out.setflags(write=False)
    return out


def _polymul(a, b):
    out = [mpmath.mpc(0)] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


def highpass_filter(h: np.ndarray) -> np.ndarray:
    n = len(h)
    g = np.array([(-1) ** k * h[n - 1 - k] for k in range(n)])
    g.setflags(write=False)
    return g


# -- kernels ------------------------------------------------------------------

@numba.njit(nogil=True, cache=True)
def _analysis_rows(src, dst, m, h, g):
    """One periodic analysis step along axis 1 on the leading ``m x m`` block."""
    half = m // 2
    taps = h.shape[0]
    for r in range(m):
        for k in range(half):
            a = 0.0
            d = 0.0
            base = 2 * k
            if base + taps <= m:
                for t in range(taps):
                    v = src[r, base + t]
                    a += h[t] * v
                    d += g[t] * v
            else:
                for t in range(taps):
                    v = src[r, (base + t) % m]
                    a += h[t] * v
                    d += g[t] * v
            dst[r, k] = a
            dst[r, half + k] = d


@numba.njit(nogil=True, cache=True)
def _analysis_cols(src, dst, m, h, g):
    half = m // 2
    taps = h.shape[0]
    rows = np.empty(taps, dtype=np.int64)
    for k in range(half):
        for t in range(taps):
            rows[t] = (2 * k + t) % m
        for c in range(m):
            a = 0.0
            d = 0.0
            for t in range(taps):
                v = src[rows[t], c]
                a += h[t] * v
                d += g[t] * v
            dst[k, c] = a
            dst[half + k, c] = d


@numba.njit(nogil=True, cache=True)
def _synthesis_rows(src, dst, m, h, g):
    half = m // 2
    taps = h.shape[0]
    for r in range(m):
        for c in range(m):
            dst[r, c] = 0.0
        for k in range(half):
            a = src[r, k]
            d = src[r, half + k]
            for t in range(taps):
                dst[r, (2 * k + t) % m] += h[t] * a + g[t] * d


@numba.njit(nogil=True, cache=True)
def _synthesis_cols(src, dst, m, h, g):
    half = m // 2
    taps = h.shape[0]
    for r in range(m):
        for c in range(m):
            dst[r, c] = 0.0
    for k in range(half):
        for t in range(taps):
            row = (2 * k + t) % m
            ht = h[t]
            gt = g[t]
            for c in range(m):
                dst[row, c] += ht * src[k, c] + gt * src[half + k, c]


@numba.njit(nogil=True, cache=True)
def _forward(x, h, g):
    n = x.shape[0]
    out = x.copy()
    tmp = np.empty_like(x)
    m = n
    while m > 1:
        _analysis_rows(out, tmp, m, h, g)
        _analysis_cols(tmp, out, m, h, g)
        m //= 2
    return out


@numba.njit(nogil=True, cache=True)
def _inverse(c, h, g):
    n = c.shape[0]
    out = c.copy()
    tmp = np.empty_like(c)
    m = 2
    while m <= n:
        _synthesis_cols(out, tmp, m, h, g)
        _synthesis_rows(tmp, out, m, h, g)
        m *= 2
    return out


# -- public API ---------------------------------------------------------------

def _check(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"expected a square 2D grid, got shape {x.shape}")
    n = x.shape[0]
    if n < 1 or n & (n - 1):
        raise ValueError(f"grid side {n} is not a power of two")
    return x


def dwt_forward(x: np.ndarray, order: int = 3) -> np.ndarray:
    """Full-depth 2D forward transform ``W x``."""
    h = daubechies_filter(order)
    return _forward(_check(x), h, highpass_filter(h))


def dwt_inverse(c: np.ndarray, order: int = 3) -> np.ndarray:
    """Inverse transform ``W^-1 c``."""
    h = daubechies_filter(order)
    return _inverse(_check(c), h, highpass_filter(h))


def dwt_inverse_transposed(x: np.ndarray, order: int = 3) -> np.ndarray:
    """Adjoint of :func:`dwt_inverse`.

    The synthesis scatter-add transposes to the analysis gather, so this runs
    the analysis kernels; for an orthonormal basis it coincides with
    :func:`dwt_forward`.
    """
    h = daubechies_filter(order)
    return _forward(_check(x), h, highpass_filter(h))


def scale_index_map(order_j: int) -> np.ndarray:
    """Integer grid giving the scale index ``0..J`` of every coefficient."""
    n = 2**order_j
    scale = np.zeros((n, n), dtype=np.int64)
    for j in range(1, order_j + 1):
        s = 2 ** (j - 1)
        scale[0:s, s : 2 * s] = j
        scale[s : 2 * s, 0:s] = j
        scale[s : 2 * s, s : 2 * s] = j
    return scale


def subbands(order_j: int) -> list[tuple[int, int, tuple[slice, slice]]]:
    """``(scale, orientation, block)`` for every sub-band; orientation 0 is coarse."""
    out = [(0, 0, (slice(0, 1), slice(0, 1)))]
    for j in range(1, order_j + 1):
        s = 2 ** (j - 1)
        out.append((j, 1, (slice(0, s), slice(s, 2 * s))))
        out.append((j, 2, (slice(s, 2 * s), slice(0, s))))
        out.append((j, 3, (slice(s, 2 * s), slice(s, 2 * s))))
    return out
