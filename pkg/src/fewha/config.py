"""AO system geometry: validation, JSON (de)serialization and derived grids.

All grid layouts used by the operators are derived here so that the forward
model, the reconstructor and the simulation agree on node positions:

* aperture nodes of WFS ``g``: ``-D/2 + i * D / n_s`` for ``i = 0..n_s``;
* layer grid ``l`` (``n = 2**J`` nodes per side): ``(k - n/2) * spacing``;
* DM grid ``m`` (``n_a`` nodes per side): evenly spaced over the meta-pupil.

Arrays are indexed ``[row, col] = [y, x]``; directions are ``(theta_x, theta_y)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

ARCSEC = math.pi / (180.0 * 3600.0)

PRESET_DIR = Path(__file__).parent / "presets"


class ConfigError(ValueError):
    """Raised when a configuration file is malformed or violates an invariant."""


@dataclass(frozen=True)
class Grid2D:
    """Square node grid; node ``k`` sits at ``origin + k * spacing`` on both axes."""

    n: int
    origin: float
    spacing: float

    @property
    def coords(self) -> np.ndarray:
        return self.origin + self.spacing * np.arange(self.n)

    @property
    def upper(self) -> float:
        return self.origin + self.spacing * (self.n - 1)


@dataclass(frozen=True)
class WfsConfig:
    n_subap: int
    noise_variance: float


@dataclass(frozen=True)
class GuideStar:
    kind: str  # "NGS" or "LGS"
    direction: tuple[float, float]  # radians
    height: float = math.inf  # sodium height for LGS, inf for NGS

    @property
    def is_lgs(self) -> bool:
        return self.kind == "LGS"

    def cone_scale(self, h: float) -> float:
        """Footprint shrink factor ``1 - h/H`` at altitude ``h`` (1 for NGS)."""
        return 1.0 - h / self.height if self.is_lgs else 1.0


@dataclass(frozen=True)
class LayerConfig:
    height: float
    grid_order: int
    relative_strength: float
    extent: float | None = None  # None: derived from the meta-pupil

    @property
    def n(self) -> int:
        return 2**self.grid_order


@dataclass(frozen=True)
class DmConfig:
    n_act: int
    conjugation_height: float


@dataclass(frozen=True)
class SystemGeometry:
    telescope_diameter: float
    central_obstruction_fraction: float
    wfs_list: tuple[WfsConfig, ...]
    guide_stars: tuple[GuideStar, ...]
    layers: tuple[LayerConfig, ...]
    dms: tuple[DmConfig, ...]
    pcg_max_iter: int = 4
    regularization_alpha: float = 1.0
    gain: float = 0.4
    loop_mode: str = "closed"
    illumination_threshold: float = 0.5
    wavelet_order: int = 3
    outer_scale: float = 25.0
    spectral_exponent: float = 11.0 / 6.0
    preconditioner: str = "approximate"
    coarse_weight: float = 4.0
    pcg_tolerance: float | None = None
    pcg_carry_direction: bool = False
    threads: int | None = None
    eval_grid_n: int = 5
    eval_half_width: float = 60.0 * ARCSEC
    r0: float = 0.15
    wind: tuple[tuple[float, float], ...] | None = None
    fault_injection: str | None = None
    name: str = ""

    def __post_init__(self):
        validate(self)

    # -- counts -----------------------------------------------------------
    @property
    def n_wfs(self) -> int:
        return len(self.wfs_list)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_dms(self) -> int:
        return len(self.dms)

    @property
    def default_threads(self) -> int:
        return max(self.n_layers, self.n_wfs)

    # -- derived geometry -------------------------------------------------
    def subaperture_size(self, g: int) -> float:
        return self.telescope_diameter / self.wfs_list[g].n_subap

    def aperture_grid(self, g: int) -> Grid2D:
        n_s = self.wfs_list[g].n_subap
        return Grid2D(n_s + 1, -self.telescope_diameter / 2, self.subaperture_size(g))

    def active_mask(self, g: int) -> np.ndarray:
        return self._active_masks[g]

    @cached_property
    def _active_masks(self) -> tuple[np.ndarray, ...]:
        masks = []
        for g in range(self.n_wfs):
            m = compute_active_subapertures(self, g)
            m.setflags(write=False)
            masks.append(m)
        return tuple(masks)

    @cached_property
    def eval_directions(self) -> tuple[tuple[float, float], ...]:
        if self.eval_grid_n == 1:
            ticks = np.zeros(1)
        else:
            ticks = np.linspace(-self.eval_half_width, self.eval_half_width, self.eval_grid_n)
        return tuple((float(tx), float(ty)) for ty in ticks for tx in ticks)

    def meta_pupil_halfwidth(self, h: float) -> float:
        """Half side of the square covering every beam footprint at altitude ``h``.

        Guide stars and the quality-evaluation directions both count; the
        latter are needed so truth and DM shapes can be probed off-axis.
        """
        d_half = self.telescope_diameter / 2
        radius = 0.0
        for star in self.guide_stars:
            theta = math.hypot(*star.direction)
            radius = max(radius, star.cone_scale(h) * d_half + theta * h)
        for direction in self.eval_directions:
            radius = max(radius, d_half + math.hypot(*direction) * h)
        return radius

    def layer_extent(self, ell: int) -> float:
        layer = self.layers[ell]
        if layer.extent is not None:
            return layer.extent
        return layer_extent(self, ell)

    def layer_grid(self, ell: int) -> Grid2D:
        n = self.layers[ell].n
        spacing = self.layer_extent(ell) / (n - 1)
        return Grid2D(n, -(n // 2) * spacing, spacing)

    def dm_grid(self, m: int) -> Grid2D:
        dm = self.dms[m]
        half = self.meta_pupil_halfwidth(dm.conjugation_height)
        return Grid2D(dm.n_act, -half, 2 * half / (dm.n_act - 1))

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(layer.n**2 for layer in self.layers)

    @property
    def n_coeffs(self) -> int:
        return sum(self.layer_sizes)

    @property
    def n_measurements(self) -> int:
        return sum(2 * w.n_subap**2 for w in self.wfs_list)

    def replace(self, **kwargs) -> "SystemGeometry":
        return replace(self, **kwargs)


def layer_extent(geometry: SystemGeometry, ell: int) -> float:
    """Side length of layer grid ``ell`` derived from the meta-pupil.

    Nodes sit at ``(k - n/2) * spacing``, so the positive side reaches
    ``(n/2 - 1) * spacing``; the spacing is chosen so that this covers the
    meta-pupil half-width plus one further grid cell.
    """
    layer = geometry.layers[ell]
    n = layer.n
    half = geometry.meta_pupil_halfwidth(layer.height)
    spacing = half / (n // 2 - 2)
    return spacing * (n - 1)


def _disk_rect_area(r: float, x0: float, x1: float, y0: float, y1: float) -> float:
    """Exact area of the origin-centred disk of radius ``r`` inside a rectangle."""
    if r <= 0.0:
        return 0.0
    a, b = max(x0, -r), min(x1, r)
    if a >= b:
        return 0.0

    def prim(t: float) -> float:  # antiderivative of sqrt(r^2 - t^2)
        t = min(max(t, -r), r)
        return 0.5 * (t * math.sqrt(max(r * r - t * t, 0.0)) + r * r * math.asin(t / r))

    cuts = {a, b}
    for y in (y0, y1):
        if abs(y) < r:
            t = math.sqrt(r * r - y * y)
            cuts.update(c for c in (-t, t) if a < c < b)
    cuts = sorted(cuts)
    area = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        s = math.sqrt(max(r * r - mid * mid, 0.0))
        top_is_circle = s < y1
        bottom_is_circle = -s > y0
        top = s if top_is_circle else y1
        bottom = -s if bottom_is_circle else y0
        if top <= bottom:
            continue
        circ = prim(hi) - prim(lo)
        width = hi - lo
        area += (circ if top_is_circle else y1 * width) - (-circ if bottom_is_circle else y0 * width)
    return area


def compute_active_subapertures(geometry: SystemGeometry, wfs_index: int) -> np.ndarray:
    """Boolean ``n_s x n_s`` mask of subapertures lit above the illumination threshold."""
    n_s = geometry.wfs_list[wfs_index].n_subap
    d = geometry.telescope_diameter
    r_out = d / 2
    r_in = geometry.central_obstruction_fraction * d / 2
    edges = -d / 2 + np.arange(n_s + 1) * (d / n_s)
    cell_area = (d / n_s) ** 2
    mask = np.zeros((n_s, n_s), dtype=bool)
    for i in range(n_s):
        for j in range(n_s):
            x0, x1, y0, y1 = edges[j], edges[j + 1], edges[i], edges[i + 1]
            lit = _disk_rect_area(r_out, x0, x1, y0, y1) - _disk_rect_area(r_in, x0, x1, y0, y1)
            mask[i, j] = lit / cell_area >= geometry.illumination_threshold
    return mask


def validate(geo: SystemGeometry) -> None:
    def fail(msg: str):
        raise ConfigError(msg)

    if not geo.telescope_diameter > 0:
        fail("telescope diameter must be positive")
    if not 0 <= geo.central_obstruction_fraction < 1:
        fail("central obstruction fraction out of [0,1)")
    if len(geo.wfs_list) == 0:
        fail("at least one WFS is required")
    if len(geo.guide_stars) != len(geo.wfs_list):
        fail(f"{len(geo.guide_stars)} guide stars for {len(geo.wfs_list)} WFS; need one per WFS")
    if len(geo.layers) == 0:
        fail("at least one layer is required")
    for w in geo.wfs_list:
        if w.n_subap < 1:
            fail("n_subap must be >= 1")
        if not w.noise_variance > 0:
            fail("noise_variance must be > 0")
    for s in geo.guide_stars:
        if s.kind not in ("NGS", "LGS"):
            fail(f"unknown guide star kind {s.kind!r}")
        if s.is_lgs and not (math.isfinite(s.height) and s.height > 0):
            fail("LGS height must be finite and positive")
        if not s.is_lgs and not math.isinf(s.height):
            fail("NGS height must be infinite")
    heights = [layer.height for layer in geo.layers]
    if heights[0] < 0:
        fail("layer heights must be >= 0")
    if any(h1 <= h0 for h0, h1 in zip(heights, heights[1:])):
        fail("layer heights must be strictly increasing")
    for s in geo.guide_stars:
        if s.is_lgs and s.height <= heights[-1]:
            fail("LGS height must exceed the highest layer")
    for layer in geo.layers:
        if layer.grid_order < 3:
            fail("layer grid_order must be >= 3")
        if not 0 < layer.relative_strength <= 1:
            fail("relative_strength out of (0,1]")
    if abs(sum(layer.relative_strength for layer in geo.layers) - 1.0) > 1e-12:
        fail("layer relative strengths must sum to 1")
    for dm in geo.dms:
        if dm.n_act < 2:
            fail("n_act must be >= 2")
    if not 0 <= geo.gain <= 1:
        fail("gain out of [0,1]")
    if geo.pcg_max_iter < 1:
        fail("pcg_max_iter must be >= 1")
    if not geo.regularization_alpha > 0:
        fail("regularization_alpha must be > 0")
    if geo.loop_mode not in ("closed", "open"):
        fail(f"loop mode must be 'closed' or 'open', got {geo.loop_mode!r}")
    if not 0 < geo.illumination_threshold <= 1:
        fail("illumination threshold out of (0,1]")
    if not 1 <= geo.wavelet_order <= 10:
        fail("wavelet order must be in 1..10")
    if geo.preconditioner not in ("exact", "approximate"):
        fail("preconditioner must be 'exact' or 'approximate'")
    if not geo.coarse_weight > 0:
        fail("coarse_weight must be > 0")
    if geo.threads is not None and geo.threads < 1:
        fail("threads must be >= 1")
    if geo.eval_grid_n < 1:
        fail("eval_grid_n must be >= 1")
    if geo.wind is not None and len(geo.wind) != len(geo.layers):
        fail("wind needs one vector per layer")
    for ell, layer in enumerate(geo.layers):
        if layer.extent is not None:
            need = layer_extent(geo, ell)
            if layer.extent < need * (1 - 1e-12):
                fail(f"layer {ell} extent {layer.extent} smaller than meta-pupil requirement {need}")


# -- JSON I/O ---------------------------------------------------------------

def _get(d: dict, key: str, where: str):
    try:
        return d[key]
    except KeyError:
        raise ConfigError(f"missing key {where}.{key}") from None


def geometry_from_dict(data: dict[str, Any]) -> SystemGeometry:
    try:
        tel = _get(data, "telescope", "")
        if "obstructed_area_fraction" in tel:
            obstruction = math.sqrt(float(tel["obstructed_area_fraction"]))
        else:
            obstruction = float(tel.get("central_obstruction", 0.0))
        wfs = tuple(
            WfsConfig(int(_get(w, "n_subap", "wfs")), float(_get(w, "noise_variance", "wfs")))
            for w in _get(data, "wfs", "")
        )
        stars = []
        for s in _get(data, "guide_stars", ""):
            kind = str(_get(s, "kind", "guide_stars")).upper()
            direction = tuple(float(v) for v in _get(s, "direction", "guide_stars"))
            if len(direction) != 2:
                raise ConfigError("guide star direction must have two components")
            height = s.get("height")
            stars.append(GuideStar(kind, direction, math.inf if height is None else float(height)))
        layers = tuple(
            LayerConfig(
                float(_get(layer, "height", "layers")),
                int(_get(layer, "grid_order", "layers")),
                float(_get(layer, "relative_strength", "layers")),
                None if layer.get("extent") is None else float(layer["extent"]),
            )
            for layer in _get(data, "layers", "")
        )
        dms = tuple(
            DmConfig(int(_get(d, "n_act", "dms")), float(_get(d, "conjugation_height", "dms")))
            for d in _get(data, "dms", "")
        )
        solver = _get(data, "solver", "")
        loop = _get(data, "loop", "")
        wind = loop.get("wind")
        return SystemGeometry(
            telescope_diameter=float(_get(tel, "diameter", "telescope")),
            central_obstruction_fraction=obstruction,
            illumination_threshold=float(tel.get("illumination_threshold", 0.5)),
            wfs_list=wfs,
            guide_stars=tuple(stars),
            layers=layers,
            dms=dms,
            pcg_max_iter=int(solver.get("max_iter", 4)),
            regularization_alpha=float(_get(solver, "alpha", "solver")),
            wavelet_order=int(solver.get("wavelet_order", 3)),
            outer_scale=float(solver.get("outer_scale", 25.0)),
            spectral_exponent=float(solver.get("spectral_exponent", 11.0 / 6.0)),
            preconditioner=str(solver.get("preconditioner", "approximate")),
            coarse_weight=float(solver.get("coarse_weight", 4.0)),
            pcg_tolerance=None if solver.get("tolerance") is None else float(solver["tolerance"]),
            threads=None if solver.get("threads") is None else int(solver["threads"]),
            pcg_carry_direction=bool(solver.get("carry_direction", False)),
            fault_injection=solver.get("fault_injection"),
            gain=float(loop.get("gain", 0.4)),
            loop_mode=str(loop.get("mode", "closed")),
            eval_grid_n=int(loop.get("eval_grid_n", 5)),
            eval_half_width=float(loop.get("eval_half_width", 60.0 * ARCSEC)),
            r0=float(loop.get("r0", 0.15)),
            wind=None if wind is None else tuple((float(a), float(b)) for a, b in wind),
            name=str(data.get("name", "")),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc


def geometry_to_dict(geo: SystemGeometry) -> dict[str, Any]:
    return {
        "name": geo.name,
        "telescope": {
            "diameter": geo.telescope_diameter,
            "central_obstruction": geo.central_obstruction_fraction,
            "illumination_threshold": geo.illumination_threshold,
        },
        "wfs": [{"n_subap": w.n_subap, "noise_variance": w.noise_variance} for w in geo.wfs_list],
        "guide_stars": [
            {
                "kind": s.kind,
                "direction": list(s.direction),
                "height": None if math.isinf(s.height) else s.height,
            }
            for s in geo.guide_stars
        ],
        "layers": [
            {
                "height": layer.height,
                "grid_order": layer.grid_order,
                "relative_strength": layer.relative_strength,
                "extent": layer.extent,
            }
            for layer in geo.layers
        ],
        "dms": [{"n_act": d.n_act, "conjugation_height": d.conjugation_height} for d in geo.dms],
        "solver": {
            "max_iter": geo.pcg_max_iter,
            "alpha": geo.regularization_alpha,
            "wavelet_order": geo.wavelet_order,
            "outer_scale": geo.outer_scale,
            "spectral_exponent": geo.spectral_exponent,
            "preconditioner": geo.preconditioner,
            "coarse_weight": geo.coarse_weight,
            "tolerance": geo.pcg_tolerance,
            "threads": geo.threads,
            "carry_direction": geo.pcg_carry_direction,
            "fault_injection": geo.fault_injection,
        },
        "loop": {
            "mode": geo.loop_mode,
            "gain": geo.gain,
            "eval_grid_n": geo.eval_grid_n,
            "eval_half_width": geo.eval_half_width,
            "r0": geo.r0,
            "wind": None if geo.wind is None else [list(v) for v in geo.wind],
        },
    }


def load_config(path: str | Path) -> SystemGeometry:
    """Load a JSON config; a bare name such as ``mini`` falls back to the shipped presets."""
    path = Path(path)
    if not path.exists() and path.parent == Path("."):
        for candidate in (PRESET_DIR / path.name, PRESET_DIR / f"{path.name}.json"):
            if candidate.exists():
                path = candidate
                break
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"parse error in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"parse error in {path}: top level must be an object")
    return geometry_from_dict(data)


def dump_config(geo: SystemGeometry) -> str:
    return json.dumps(geometry_to_dict(geo), indent=2)


def save_config(geo: SystemGeometry, path: str | Path) -> None:
    Path(path).write_text(dump_config(geo) + "\n", encoding="utf-8")


def load_preset(name: str) -> SystemGeometry:
    return load_config(PRESET_DIR / f"{name}.json")


def with_layers(geo: SystemGeometry, n_layers: int) -> SystemGeometry:
    """Copy of ``geo`` with ``n_layers`` equal-strength layers and as many DMs.

    Heights are spread evenly between the lowest and highest base layer; DMs
    are conjugated to them and take the base actuator counts in order, the
    last base DM's count repeating when more DMs are needed.
    """
    if n_layers < 1:
        raise ConfigError("need at least one layer")
    base = geo.layers
    heights = np.linspace(base[0].height, base[-1].height, n_layers) if n_layers > 1 else [base[0].height]
    strengths = [1.0 / n_layers] * n_layers
    strengths[-1] = 1.0 - sum(strengths[:-1])
    layers = tuple(
        LayerConfig(float(h), base[min(i, len(base) - 1)].grid_order, s) for i, (h, s) in enumerate(zip(heights, strengths))
    )
    acts = [d.n_act for d in geo.dms] or [geo.wfs_list[0].n_subap + 1]
    dms = tuple(DmConfig(acts[min(i, len(acts) - 1)], float(h)) for i, h in enumerate(heights))
    return replace(geo, layers=layers, dms=dms, wind=None)
