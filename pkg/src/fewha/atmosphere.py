"""Synthetic truth, measurement synthesis and closed-loop quality evaluation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Grid2D, SystemGeometry
from .operators import TomographyOperators, _gather_add, interp_table
from .reconstructor import Reconstructor


@dataclass
class AtmosphereTruth:
    """Ground-truth layers; ``spectra`` allow exact frozen-flow translation."""

    layers: list[np.ndarray]
    seed: int
    outer_scale: float
    spectra: list[np.ndarray] = field(repr=False, default_factory=list)
    spacings: list[float] = field(repr=False, default_factory=list)

    def flat(self) -> np.ndarray:
        return np.concatenate([x.ravel() for x in self.layers])

    def shifted(self, wind, step: int) -> "AtmosphereTruth":
        """Layers translated by ``wind[l] * step`` metres (periodic Fourier shift)."""
        if wind is None or step == 0:
            return self
        moved = []
        for spec, dx, (vx, vy) in zip(self.spectra, self.spacings, wind):
            n = spec.shape[0]
            f = np.fft.fftfreq(n, d=dx)
            phase = np.exp(-2j * np.pi * (f[None, :] * vx * step + f[:, None] * vy * step))
            screen = np.real(np.fft.ifft2(spec * phase))
            moved.append(screen - screen.mean())
        return AtmosphereTruth(moved, self.seed, self.outer_scale, self.spectra, self.spacings)


def von_karman_screen(n: int, spacing: float, r0: float, outer_scale: float, rng: np.random.Generator):
    """Periodic FFT phase screen [rad] and its Fourier coefficients.

    Phase PSD ``0.023 r0^(-5/3) (f^2 + 1/L0^2)^(-11/6)`` with ``f`` in cycles/m;
    the zero-frequency term is dropped so the screen has zero mean.
    """
    f = np.fft.fftfreq(n, d=spacing)
    f2 = f[None, :] ** 2 + f[:, None] ** 2
    f0 = 1.0 / outer_scale if np.isfinite(outer_scale) else 0.0
    with np.errstate(divide="ignore"):
        psd = 0.023 * r0 ** (-5.0 / 3.0) * (f2 + f0**2) ** (-11.0 / 6.0)
    psd[0, 0] = 0.0
    df = 1.0 / (n * spacing)
    noise = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    spec = noise * np.sqrt(psd) * df * n * n
    screen = np.real(np.fft.ifft2(spec))
    return screen - screen.mean(), spec


def generate_atmosphere(geometry: SystemGeometry, seed: int, outer_scale: float | None = None) -> AtmosphereTruth:
    """Von Karman layers with variance proportional to each layer's Cn2 fraction."""
    outer_scale = geometry.outer_scale if outer_scale is None else outer_scale
    rng = np.random.default_rng(seed)
    layers, spectra, spacings = [], [], []
    for ell, layer in enumerate(geometry.layers):
        grid = geometry.layer_grid(ell)
        r0_layer = geometry.r0 * layer.relative_strength ** (-3.0 / 5.0)
        screen, spec = von_karman_screen(layer.n, grid.spacing, r0_layer, outer_scale, rng)
        layers.append(screen)
        spectra.append(spec)
        spacings.append(grid.spacing)
    return AtmosphereTruth(layers, seed, outer_scale, spectra, spacings)


def synthesize_measurements(
    truth: AtmosphereTruth,
    correction: np.ndarray | None,
    ops: TomographyOperators,
    noise_seed: int | None = None,
    noise: bool = True,
) -> np.ndarray:
    """Slopes ``Gamma P phi`` minus the mirror's slopes, plus WFS noise."""
    s = ops.forward(truth.flat())
    if correction is not None:
        s = s - ops.dm_measurements(correction)
    if noise:
        rng = np.random.default_rng(noise_seed)
        active = np.concatenate([np.tile(m.ravel(), 2) for m in ops.masks])
        sigma = np.sqrt(1.0 / ops.noise_weights())
        s = s + rng.standard_normal(s.size) * sigma * active
    return s


@dataclass
class QualityRecord:
    step: int
    rms: np.ndarray  # piston-removed residual RMS per probe direction [rad]
    field_rms: float
    layer_error: float
    rho: list[float] = field(default_factory=list)


class QualityEvaluator:
    """Residual wavefront along the probe directions over the pupil."""

    def __init__(self, geometry: SystemGeometry, directions=None):
        self.geometry = geometry
        self.directions = list(directions if directions is not None else geometry.eval_directions)
        if not self.directions:
            raise ValueError("evaluation grid is empty")
        self.aperture: Grid2D = geometry.aperture_grid(0)
        x = self.aperture.coords
        r = np.hypot(x[None, :], x[:, None])
        d = geometry.telescope_diameter
        self.pupil = (r <= d / 2 + 1e-12) & (r >= geometry.central_obstruction_fraction * d / 2)
        self.layer_tables = []
        self.dm_tables = []
        for k, theta in enumerate(self.directions):
            self.layer_tables.append([
                interp_table(self.aperture, geometry.layer_grid(ell), theta, 1.0, layer.height, f"probe {k} layer {ell}")
                for ell, layer in enumerate(geometry.layers)
            ])
            self.dm_tables.append([
                interp_table(self.aperture, geometry.dm_grid(m), theta, 1.0, dm.conjugation_height, f"probe {k} DM {m}")
                for m, dm in enumerate(geometry.dms)
            ])

    def residual(self, k: int, layers, dms) -> np.ndarray:
        n = self.aperture.n
        out = np.zeros((n, n))
        for layer, t in zip(layers, self.layer_tables[k]):
            _gather_add(layer, out, t.iy, t.wy, t.ix, t.wx)
        if dms is not None:
            corr = np.zeros((n, n))
            for shape, t in zip(dms, self.dm_tables[k]):
                _gather_add(shape, corr, t.iy, t.wy, t.ix, t.wx)
            out -= corr
        return out

    def rms(self, wave: np.ndarray) -> float:
        v = wave[self.pupil]
        return float(np.sqrt(np.mean((v - v.mean()) ** 2)))


def evaluate_quality(
    truth: AtmosphereTruth,
    correction: np.ndarray | None,
    evaluator: QualityEvaluator,
    ops: TomographyOperators,
    reconstructed: np.ndarray | None = None,
    step: int = 0,
) -> QualityRecord:
    dms = None if correction is None else ops.split_dms(np.ascontiguousarray(correction, dtype=np.float64))
    rms = np.array([evaluator.rms(evaluator.residual(k, truth.layers, dms)) for k in range(len(evaluator.directions))])
    field_rms = float(np.sqrt(np.mean(rms**2)))
    true_flat = truth.flat()
    norm = np.linalg.norm(true_flat)
    if reconstructed is None or norm == 0.0:
        layer_error = 0.0 if norm == 0.0 else 1.0
    else:
        layer_error = float(np.linalg.norm(reconstructed - true_flat) / norm)
    return QualityRecord(step, rms, field_rms, layer_error)


@dataclass
class LoopResult:
    records: list[QualityRecord]
    uncorrected: QualityRecord

    @property
    def final_rms(self) -> float:
        return self.records[-1].field_rms

    @property
    def improvement(self) -> float:
        return self.uncorrected.field_rms / self.final_rms if self.final_rms > 0 else float("inf")


def run_closed_loop(
    geometry: SystemGeometry,
    n_steps: int,
    seed: int = 0,
    noise_seed: int = 1,
    noise: bool = True,
    threads: int | None = None,
    reconstructor: Reconstructor | None = None,
) -> LoopResult:
    """Step the loop: measure through ``a^(k-1)``, reconstruct ``a^(k+1)``, score it."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rec = reconstructor or Reconstructor(geometry, threads=threads)
    ops = rec.ops
    evaluator = QualityEvaluator(geometry)
    base = generate_atmosphere(geometry, seed)
    state = rec.new_state()
    uncorrected = evaluate_quality(base, None, evaluator, ops)
    noise_rng = np.random.default_rng(noise_seed)
    records = []
    try:
        for k in range(n_steps):
            truth = base.shifted(geometry.wind, k)
            applied = state.a_prev2 if geometry.loop_mode == "closed" else None
            s = synthesize_measurements(truth, applied, ops, int(noise_rng.integers(2**63)), noise)
            a_next = rec.reconstruct_step(state, s)
            recon = rec.layers_to_flat(rec.coeff_to_layers(state.c_prev))
            record = evaluate_quality(truth, a_next, evaluator, ops, recon, step=k)
            record.rho = list(rec.telemetry[-1].rho)
            records.append(record)
    finally:
        if reconstructor is None:
            rec.close()
    return LoopResult(records, uncorrected)


def quality_csv(result: LoopResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    n_dir = len(result.uncorrected.rms)
    writer.writerow(["step"] + [f"rms_dir{k:02d}" for k in range(n_dir)] + ["field_rms", "layer_error", "rho"])
    for rec in [result.uncorrected] + result.records:
        step = -1 if rec is result.uncorrected else rec.step
        writer.writerow(
            [step] + [repr(float(v)) for v in rec.rms] + [repr(rec.field_rms), repr(rec.layer_error), ";".join(repr(r) for r in rec.rho)]
        )
    return buf.getvalue()


def write_quality_csv(result: LoopResult, path: str | Path) -> None:
    Path(path).write_text(quality_csv(result), encoding="utf-8")
