"""Matrix-free finite-element operators for atmospheric tomography.

Vectors crossing module boundaries are flat ``float64`` arrays:

* wavelet coefficients / layer values: per-layer ``n_l x n_l`` grids raveled
  and concatenated in layer order;
* measurements: per WFS ``[s_x.ravel(), s_y.ravel()]`` (``n_s x n_s`` each),
  concatenated in WFS order;
* mirror shapes: per-DM ``n_a x n_a`` grids raveled and concatenated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numba
import numpy as np

from .config import GuideStar, Grid2D, SystemGeometry
from .wavelet import scale_index_map

# -- kernels ------------------------------------------------------------------


@numba.njit(nogil=True, cache=True)
def _sh_forward(phi, mask, sx, sy):
    n = mask.shape[0]
    for i in range(n):
        for j in range(n):
            if mask[i, j]:
                sx[i, j] = 0.5 * ((phi[i, j + 1] - phi[i, j]) + (phi[i + 1, j + 1] - phi[i + 1, j]))
                sy[i, j] = 0.5 * ((phi[i + 1, j] - phi[i, j]) + (phi[i + 1, j + 1] - phi[i, j + 1]))
            else:
                sx[i, j] = 0.0
                sy[i, j] = 0.0


@numba.njit(nogil=True, cache=True)
def _sh_adjoint(sx, sy, mask, phi):
    n = mask.shape[0]
    for i in range(n + 1):
        for j in range(n + 1):
            phi[i, j] = 0.0
    for i in range(n):
        for j in range(n):
            if mask[i, j]:
                a = 0.5 * sx[i, j]
                b = 0.5 * sy[i, j]
                phi[i, j] -= a + b
                phi[i, j + 1] += a - b
                phi[i + 1, j] += b - a
                phi[i + 1, j + 1] += a + b


@numba.njit(nogil=True, cache=True)
def _gather_add(layer, out, iy, wy, ix, wx):
    for i in range(iy.shape[0]):
        y0 = iy[i]
        fy = wy[i]
        for j in range(ix.shape[0]):
            x0 = ix[j]
            fx = wx[j]
            top = (1.0 - fx) * layer[y0, x0] + fx * layer[y0, x0 + 1]
            bot = (1.0 - fx) * layer[y0 + 1, x0] + fx * layer[y0 + 1, x0 + 1]
            out[i, j] += (1.0 - fy) * top + fy * bot


@numba.njit(nogil=True, cache=True)
def _scatter_add(wave, layer, iy, wy, ix, wx):
    for i in range(iy.shape[0]):
        y0 = iy[i]
        fy = wy[i]
        for j in range(ix.shape[0]):
            x0 = ix[j]
            fx = wx[j]
            v = wave[i, j]
            vt = (1.0 - fy) * v
            vb = fy * v
            layer[y0, x0] += (1.0 - fx) * vt
            layer[y0, x0 + 1] += fx * vt
            layer[y0 + 1, x0] += (1.0 - fx) * vb
            layer[y0 + 1, x0 + 1] += fx * vb


# -- interpolation tables -----------------------------------------------------


class OutOfGridError(ValueError):
    """An interpolation point fell outside its source grid."""


@dataclass(frozen=True)
class InterpTable:
    """Separable bilinear lookup from an aperture grid into a source grid."""

    iy: np.ndarray
    wy: np.ndarray
    ix: np.ndarray
    wx: np.ndarray


def _axis_table(points: np.ndarray, grid: Grid2D, what: str) -> tuple[np.ndarray, np.ndarray]:
    f = (points - grid.origin) / grid.spacing
    tol = 1e-9
    if f.min() < -tol or f.max() > grid.n - 1 + tol:
        raise OutOfGridError(
            f"{what}: evaluation points span [{points.min():.6g}, {points.max():.6g}] m, "
            f"grid covers [{grid.origin:.6g}, {grid.upper:.6g}] m"
        )
    f = np.clip(f, 0.0, grid.n - 1)
    idx = np.minimum(np.floor(f).astype(np.int64), grid.n - 2)
    return idx, f - idx


def interp_table(aperture: Grid2D, source: Grid2D, star_direction, scale: float, height: float, what: str = "") -> InterpTable:
    """Table for sampling ``source`` at ``scale * x + theta * height`` over the aperture nodes."""
    x = aperture.coords
    ix, wx = _axis_table(scale * x + star_direction[0] * height, source, what)
    iy, wy = _axis_table(scale * x + star_direction[1] * height, source, what)
    return InterpTable(iy, wy, ix, wx)


# -- single-shot functional API ----------------------------------------------


def sh_apply(wavefront: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shack-Hartmann slopes ``(s_x, s_y)`` of a nodal wavefront on the active subapertures."""
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    n = mask.shape[0]
    if wavefront.shape != (n + 1, n + 1):
        raise ValueError(f"wavefront shape {wavefront.shape} does not match {n}x{n} subapertures")
    sx = np.empty((n, n))
    sy = np.empty((n, n))
    _sh_forward(np.ascontiguousarray(wavefront, dtype=np.float64), mask, sx, sy)
    return sx, sy


def sh_transpose_apply(sx: np.ndarray, sy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    n = mask.shape[0]
    if sx.shape != (n, n) or sy.shape != (n, n):
        raise ValueError(f"slope shapes {sx.shape}, {sy.shape} do not match {n}x{n} subapertures")
    phi = np.empty((n + 1, n + 1))
    _sh_adjoint(np.ascontiguousarray(sx, dtype=np.float64), np.ascontiguousarray(sy, dtype=np.float64), mask, phi)
    return phi


def _star_tables(geometry: SystemGeometry, star: GuideStar, aperture: Grid2D) -> list[InterpTable]:
    return [
        interp_table(aperture, geometry.layer_grid(ell), star.direction, star.cone_scale(layer.height), layer.height, f"layer {ell}")
        for ell, layer in enumerate(geometry.layers)
    ]


def propagate(layers: Sequence[np.ndarray], star: GuideStar, geometry: SystemGeometry, aperture: Grid2D | None = None) -> np.ndarray:
    """Wavefront seen along ``star``: sum of bilinearly sampled layers."""
    aperture = aperture or geometry.aperture_grid(0)
    out = np.zeros((aperture.n, aperture.n))
    for layer, t in zip(layers, _star_tables(geometry, star, aperture)):
        _gather_add(np.ascontiguousarray(layer, dtype=np.float64), out, t.iy, t.wy, t.ix, t.wx)
    return out


def propagate_transpose(wavefront: np.ndarray, star: GuideStar, geometry: SystemGeometry, aperture: Grid2D | None = None) -> list[np.ndarray]:
    aperture = aperture or geometry.aperture_grid(0)
    wave = np.ascontiguousarray(wavefront, dtype=np.float64)
    out = []
    for ell, t in enumerate(_star_tables(geometry, star, aperture)):
        n = geometry.layers[ell].n
        acc = np.zeros((n, n))
        _scatter_add(wave, acc, t.iy, t.wy, t.ix, t.wx)
        out.append(acc)
    return out


def noise_weight_apply(measurements: np.ndarray, geometry: SystemGeometry) -> np.ndarray:
    """Multiply each WFS block by ``1 / sigma_g^2``."""
    return measurements * noise_weight_vector(geometry)


def noise_weight_vector(geometry: SystemGeometry) -> np.ndarray:
    return np.concatenate([np.full(2 * w.n_subap**2, 1.0 / w.noise_variance) for w in geometry.wfs_list])


# -- regularizer ----------------------------------------------------------------


def regularizer_build(geometry: SystemGeometry) -> np.ndarray:
    """Diagonal frequency-domain prior weights, one per wavelet coefficient.

    ``d = (kappa_j^2 + kappa_out^2) ** p / strength`` with
    ``kappa_j = 2**j * 2*pi / extent``, ``kappa_out = 2*pi / L0`` and ``p``
    the configured spectral exponent (11/6 by default).
    """
    kappa_out = 2 * np.pi / geometry.outer_scale if np.isfinite(geometry.outer_scale) else 0.0
    blocks = []
    for ell, layer in enumerate(geometry.layers):
        kappa0 = 2 * np.pi / geometry.layer_extent(ell)
        scale = scale_index_map(layer.grid_order)
        kappa = kappa0 * 2.0**scale
        blocks.append(((kappa**2 + kappa_out**2) ** geometry.spectral_exponent / layer.relative_strength).ravel())
    return np.concatenate(blocks)


def regularizer_apply(coeffs: np.ndarray, reg: np.ndarray, alpha: float) -> np.ndarray:
    if coeffs.shape != reg.shape:
        raise ValueError(f"coefficient shape {coeffs.shape} does not match regularizer {reg.shape}")
    return alpha * reg * coeffs


# -- preconditioner -------------------------------------------------------------


def _subband_indices(geometry: SystemGeometry):
    """Yield ``(scale, flat index array, representative flat index)`` per sub-band."""
    from .wavelet import subbands

    offset = 0
    for layer in geometry.layers:
        n = layer.n
        flat = np.arange(n * n).reshape(n, n)
        for scale, _, block in subbands(layer.grid_order):
            idx = flat[block]
            rep = idx[idx.shape[0] // 2, idx.shape[1] // 2]
            yield scale, offset + idx.ravel(), offset + rep
        offset += n * n


def preconditioner_build(
    geometry: SystemGeometry,
    reg: np.ndarray,
    m_operator: Callable[[np.ndarray], np.ndarray],
    mode: str | None = None,
    coarse_weight: float | None = None,
) -> np.ndarray:
    """Diagonal Jacobi-type preconditioner for ``M``.

    ``exact`` probes ``M`` with every canonical basis vector. ``approximate``
    probes one representative coefficient per sub-band for the data-fit part
    ``M - alpha D`` and spreads it over the sub-band, boosted by
    ``coarse_weight`` on the coarse scale.
    """
    mode = mode or geometry.preconditioner
    alpha = geometry.regularization_alpha
    n = reg.size
    if mode == "exact":
        diag = np.empty(n)
        e = np.zeros(n)
        for k in range(n):
            e[k] = 1.0
            diag[k] = m_operator(e)[k]
            e[k] = 0.0
    elif mode == "approximate":
        w_coarse = geometry.coarse_weight if coarse_weight is None else coarse_weight
        diag = alpha * reg.copy()
        e = np.zeros(n)
        for scale, idx, rep in _subband_indices(geometry):
            e[rep] = 1.0
            fit = m_operator(e)[rep] - alpha * reg[rep]
            e[rep] = 0.0
            diag[idx] += (w_coarse if scale == 0 else 1.0) * max(fit, 0.0)
    else:
        raise ValueError(f"unknown preconditioner mode {mode!r}")
    if not np.all(diag > 0) or not np.all(np.isfinite(diag)):
        raise ValueError("preconditioner has a non-positive diagonal entry; M is not SPD")
    return diag


# -- bound operator set ---------------------------------------------------------


class TomographyOperators:
    """Precomputed matrix-free operators bound to one geometry.

    Interpolation tables for every (WFS, layer) and (WFS, DM) pair are built
    once; all apply methods are pure and safe to call concurrently.
    """

    def __init__(self, geometry: SystemGeometry):
        self.geometry = geometry
        g = geometry
        self.masks = [np.ascontiguousarray(g.active_mask(k)) for k in range(g.n_wfs)]
        self.apertures = [g.aperture_grid(k) for k in range(g.n_wfs)]
        self.layer_shapes = [(layer.n, layer.n) for layer in g.layers]
        self.layer_offsets = np.concatenate([[0], np.cumsum(g.layer_sizes)])
        sizes = [2 * w.n_subap**2 for w in g.wfs_list]
        self.meas_offsets = np.concatenate([[0], np.cumsum(sizes)])
        dm_sizes = [d.n_act**2 for d in g.dms]
        self.dm_offsets = np.concatenate([[0], np.cumsum(dm_sizes)])
        self.layer_tables = [_star_tables(g, star, ap) for star, ap in zip(g.guide_stars, self.apertures)]
        self.dm_tables = [self.dm_star_tables(star, ap) for star, ap in zip(g.guide_stars, self.apertures)]
        self.inv_noise = np.array([1.0 / w.noise_variance for w in g.wfs_list])
        self.fault = g.fault_injection

    # -- layout helpers
    def split_layers(self, x: np.ndarray) -> list[np.ndarray]:
        o = self.layer_offsets
        return [x[o[k] : o[k + 1]].reshape(s) for k, s in enumerate(self.layer_shapes)]

    def split_slopes(self, s: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.geometry.wfs_list[g].n_subap
        block = s[self.meas_offsets[g] : self.meas_offsets[g + 1]]
        return block[: n * n].reshape(n, n), block[n * n :].reshape(n, n)

    def split_dms(self, a: np.ndarray) -> list[np.ndarray]:
        o = self.dm_offsets
        return [a[o[k] : o[k + 1]].reshape(d.n_act, d.n_act) for k, d in enumerate(self.geometry.dms)]

    def dm_star_tables(self, star: GuideStar, aperture: Grid2D) -> list[InterpTable]:
        g = self.geometry
        return [
            interp_table(aperture, g.dm_grid(m), star.direction, star.cone_scale(dm.conjugation_height), dm.conjugation_height, f"DM {m}")
            for m, dm in enumerate(g.dms)
        ]

    # -- per-WFS pieces
    def propagate_wfs(self, layers: Sequence[np.ndarray], g: int) -> np.ndarray:
        n = self.apertures[g].n
        out = np.zeros((n, n))
        for layer, t in zip(layers, self.layer_tables[g]):
            _gather_add(layer, out, t.iy, t.wy, t.ix, t.wx)
        return out

    def propagate_dm_wfs(self, dms: Sequence[np.ndarray], g: int) -> np.ndarray:
        n = self.apertures[g].n
        out = np.zeros((n, n))
        for shape, t in zip(dms, self.dm_tables[g]):
            _gather_add(shape, out, t.iy, t.wy, t.ix, t.wx)
        return out

    def propagate_transpose_layer(self, waves: Sequence[np.ndarray], ell: int) -> np.ndarray:
        """Accumulate ``P_{g,ell}^T`` contributions of all WFS in ascending order."""
        acc = np.zeros(self.layer_shapes[ell])
        for g, wave in enumerate(waves):
            t = self.layer_tables[g][ell]
            _scatter_add(wave, acc, t.iy, t.wy, t.ix, t.wx)
        return acc

    def sh(self, wave: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.geometry.wfs_list[g].n_subap
        sx = np.empty((n, n))
        sy = np.empty((n, n))
        _sh_forward(wave, self.masks[g], sx, sy)
        return sx, sy

    def sh_t(self, sx: np.ndarray, sy: np.ndarray, g: int) -> np.ndarray:
        n = self.geometry.wfs_list[g].n_subap
        phi = np.empty((n + 1, n + 1))
        _sh_adjoint(sx, sy, self.masks[g], phi)
        if self.fault == "sh_transpose":
            phi *= 1.001
        return phi

    def normal_wfs(self, layers: Sequence[np.ndarray], g: int) -> np.ndarray:
        """``Gamma_g^T C_g^-1 Gamma_g P_g`` applied to the layers (one WFS)."""
        sx, sy = self.sh(self.propagate_wfs(layers, g), g)
        w = self.inv_noise[g]
        return self.sh_t(sx * w, sy * w, g)

    def rhs_wfs(self, s: np.ndarray, g: int) -> np.ndarray:
        sx, sy = self.split_slopes(s, g)
        w = self.inv_noise[g]
        return self.sh_t(np.ascontiguousarray(sx * w), np.ascontiguousarray(sy * w), g)

    # -- whole-vector operators (used by oracles, tests and the simulator)
    def gamma(self, waves: Sequence[np.ndarray]) -> np.ndarray:
        parts = []
        for g, wave in enumerate(waves):
            sx, sy = self.sh(np.ascontiguousarray(wave, dtype=np.float64), g)
            parts += [sx.ravel(), sy.ravel()]
        return np.concatenate(parts)

    def gamma_t(self, s: np.ndarray) -> list[np.ndarray]:
        out = []
        for g in range(self.geometry.n_wfs):
            sx, sy = self.split_slopes(s, g)
            out.append(self.sh_t(np.ascontiguousarray(sx), np.ascontiguousarray(sy), g))
        return out

    def P(self, x: np.ndarray) -> list[np.ndarray]:
        layers = self.split_layers(np.ascontiguousarray(x, dtype=np.float64))
        return [self.propagate_wfs(layers, g) for g in range(self.geometry.n_wfs)]

    def P_t(self, waves: Sequence[np.ndarray]) -> np.ndarray:
        waves = [np.ascontiguousarray(w, dtype=np.float64) for w in waves]
        out = [self.propagate_transpose_layer(waves, ell) for ell in range(self.geometry.n_layers)]
        if self.fault == "propagate_transpose":
            out[0] *= 1.001
        return np.concatenate([o.ravel() for o in out])

    def P_dm(self, a: np.ndarray) -> list[np.ndarray]:
        dms = self.split_dms(np.ascontiguousarray(a, dtype=np.float64))
        return [self.propagate_dm_wfs(dms, g) for g in range(self.geometry.n_wfs)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Noise-free measurements ``Gamma P x`` of layer values ``x``."""
        return self.gamma(self.P(x))

    def dm_measurements(self, a: np.ndarray) -> np.ndarray:
        """Slopes ``Gamma P_dm a`` produced by mirror shapes ``a``."""
        return self.gamma(self.P_dm(a))

    def noise_weights(self) -> np.ndarray:
        return noise_weight_vector(self.geometry)

    def waves_flat(self, waves: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([w.ravel() for w in waves])

    def waves_split(self, v: np.ndarray) -> list[np.ndarray]:
        out, o = [], 0
        for ap in self.apertures:
            k = ap.n * ap.n
            out.append(v[o : o + k].reshape(ap.n, ap.n))
            o += k
        return out
