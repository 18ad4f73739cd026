"""Wavelet-domain tomographic reconstructor.

Solves ``M c = b`` with

    M = W^-T A^T C^-1 A W^-1 + alpha D,      b = W^-T A^T C^-1 s

by a few fused-PCG iterations per loop step, warm-restarted from the previous
step, and turns the layer estimate into mirror commands with a two-step
delay gain law.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .config import ConfigError, SystemGeometry
from .operators import (
    TomographyOperators,
    _gather_add,
    interp_table,
    preconditioner_build,
    regularizer_build,
)
from .parallel import StageRunner
from .wavelet import daubechies_filter, highpass_filter, _forward, _inverse

log = logging.getLogger(__name__)


class SolverError(ArithmeticError):
    """PCG produced a non-finite or indefinite scalar."""


@dataclass
class ReconstructorState:
    """Carried buffers of the control loop (all zero at loop start)."""

    c_prev: np.ndarray
    b_prev: np.ndarray
    r_prev: np.ndarray
    a_prev2: np.ndarray
    a_prev: np.ndarray
    p: np.ndarray
    q: np.ndarray
    rho_old: float = 0.0
    alpha_cg: float = 0.0
    started: bool = False
    step: int = 0

    @classmethod
    def zeros(cls, geometry: SystemGeometry) -> "ReconstructorState":
        n = geometry.n_coeffs
        n_act = sum(d.n_act**2 for d in geometry.dms)
        return cls(
            c_prev=np.zeros(n),
            b_prev=np.zeros(n),
            r_prev=np.zeros(n),
            a_prev2=np.zeros(n_act),
            a_prev=np.zeros(n_act),
            p=np.zeros(n),
            q=np.zeros(n),
        )

    def copy(self) -> "ReconstructorState":
        return ReconstructorState(
            self.c_prev.copy(), self.b_prev.copy(), self.r_prev.copy(),
            self.a_prev2.copy(), self.a_prev.copy(), self.p.copy(), self.q.copy(),
            self.rho_old, self.alpha_cg, self.started, self.step,
        )


def warm_restart_reset(state: ReconstructorState) -> ReconstructorState:
    """Zero every carried buffer so the next step runs as a cold start."""
    for buf in (state.c_prev, state.b_prev, state.r_prev, state.a_prev2, state.a_prev, state.p, state.q):
        buf[:] = 0.0
    state.rho_old = 0.0
    state.alpha_cg = 0.0
    state.started = False
    state.step = 0
    return state


@dataclass
class StepTelemetry:
    step: int
    rho: list[float] = field(default_factory=list)
    stage1: float = 0.0
    stage2: float = 0.0
    stage3: float = 0.0
    pcg: float = 0.0
    total: float = 0.0


@numba.njit(nogil=True, cache=True)
def _fused_update(p, q, c, r, z, s, alpha, beta):
    """``p = z + beta p; q = s + beta q; c += alpha p; r -= alpha q`` in one pass."""
    for i in range(p.shape[0]):
        pi = z[i] + beta * p[i]
        qi = s[i] + beta * q[i]
        p[i] = pi
        q[i] = qi
        c[i] += alpha * pi
        r[i] -= alpha * qi


def pcg_solve(
    state: ReconstructorState,
    r_bar: np.ndarray,
    preconditioner: np.ndarray,
    max_iter: int,
    m_operator: Callable[[np.ndarray], np.ndarray],
    tolerance: float | None = None,
    rho_log: list[float] | None = None,
    carry_direction: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Fused PCG started from ``state.c_prev`` with residual ``r_bar``.

    Runs exactly ``max_iter`` iterations unless ``tolerance`` is given. The
    first iteration of a call uses ``beta = 0, alpha = rho / mu``. With
    ``carry_direction`` the search directions and ``rho_old``/``alpha`` kept
    in ``state`` continue the previous call's Krylov sequence instead; only
    sound when the right-hand side has not changed.
    """
    if not carry_direction:
        state.started = False
    c = state.c_prev.copy()
    r = r_bar.copy()
    p, q = state.p, state.q
    r0_norm = np.linalg.norm(r)
    for _ in range(max_iter):
        z = r / preconditioner
        s = m_operator(z)
        rho = float(r @ z)
        mu = float(s @ z)
        if rho == 0.0:
            state.started = False
            break
        if not (np.isfinite(rho) and np.isfinite(mu)) or mu <= 0.0:
            raise SolverError(f"PCG breakdown: rho={rho!r}, mu={mu!r} (M not SPD or bad preconditioner)")
        beta = 0.0
        alpha = rho / mu
        if state.started:
            beta = rho / state.rho_old
            denom = mu - rho * beta / state.alpha_cg
            if denom > 0.0 and np.isfinite(denom):
                alpha = rho / denom
            else:
                # residual jumped since the last call; restart the direction
                beta = 0.0
        if not np.isfinite(alpha):
            raise SolverError(f"PCG breakdown: alpha={alpha!r}")
        state.rho_old = rho
        state.alpha_cg = alpha
        state.started = True
        if rho_log is not None:
            rho_log.append(rho)
        _fused_update(p, q, c, r, z, s, alpha, beta)
        if tolerance is not None and np.linalg.norm(r) <= tolerance * r0_norm:
            break
    return c, r


class Reconstructor:
    """Operator bundle plus the control step for one geometry.

    ``threads`` sets the fork width of the per-layer / per-WFS stages
    (default ``max(L, W)``). Results are bitwise independent of it.
    """

    def __init__(self, geometry: SystemGeometry, threads: int | None = None, preconditioner: np.ndarray | None = None):
        if geometry.n_dms != geometry.n_layers:
            raise ConfigError(
                f"reconstruction needs one DM per layer (L={geometry.n_layers}, M={geometry.n_dms}); "
                "L > M mirror fitting is not supported"
            )
        self.geometry = geometry
        self.ops = TomographyOperators(geometry)
        self.reg = regularizer_build(geometry)
        self.alpha_reg = self.reg * geometry.regularization_alpha
        self.threads = threads or geometry.threads or geometry.default_threads
        self.runner = StageRunner(self.threads)
        h = daubechies_filter(geometry.wavelet_order)
        self._h, self._g = h, highpass_filter(h)
        self._fit_tables = [
            interp_table(geometry.dm_grid(m), geometry.layer_grid(m), (0.0, 0.0), 1.0, 0.0, f"fit DM {m}")
            for m in range(geometry.n_dms)
        ]
        self.timings = {"stage1": 0.0, "stage2": 0.0, "stage3": 0.0}
        self.preconditioner = preconditioner if preconditioner is not None else preconditioner_build(geometry, self.reg, self.apply_M)
        self.telemetry: list[StepTelemetry] = []

    def close(self) -> None:
        self.runner.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- wavelet helpers
    def coeff_to_layers(self, c: np.ndarray) -> list[np.ndarray]:
        return [_inverse(blk, self._h, self._g) for blk in self.ops.split_layers(c)]

    def layers_to_flat(self, layers) -> np.ndarray:
        return np.concatenate([x.ravel() for x in layers])

    # -- operators
    def apply_M(self, c: np.ndarray) -> np.ndarray:
        """``M c`` as three fork-barrier stages (layers, WFS, layers)."""
        ops = self.ops
        blocks = ops.split_layers(np.ascontiguousarray(c, dtype=np.float64))
        t0 = time.perf_counter()
        layers = self.runner.map(lambda blk: _inverse(blk, self._h, self._g), blocks)
        t1 = time.perf_counter()
        waves = self.runner.map(lambda g: ops.normal_wfs(layers, g), range(self.geometry.n_wfs))
        t2 = time.perf_counter()
        offs = ops.layer_offsets
        out = np.empty(self.geometry.n_coeffs)

        def finish(ell):
            acc = ops.propagate_transpose_layer(waves, ell)
            sl = slice(offs[ell], offs[ell + 1])
            out[sl] = _forward(acc, self._h, self._g).ravel() + self.alpha_reg[sl] * c[sl]

        self.runner.map(finish, range(self.geometry.n_layers))
        t3 = time.perf_counter()
        self.timings["stage1"] += t1 - t0
        self.timings["stage2"] += t2 - t1
        self.timings["stage3"] += t3 - t2
        return out

    def build_rhs(self, s: np.ndarray) -> np.ndarray:
        """``b = W^-T A^T C^-1 s``: WFS stage, barrier, layer stage."""
        ops = self.ops
        if s.shape != (self.geometry.n_measurements,):
            raise ValueError(f"measurement vector has shape {s.shape}, expected ({self.geometry.n_measurements},)")
        s = np.ascontiguousarray(s, dtype=np.float64)
        waves = self.runner.map(lambda g: ops.rhs_wfs(s, g), range(self.geometry.n_wfs))
        out = self.runner.map(
            lambda ell: _forward(ops.propagate_transpose_layer(waves, ell), self._h, self._g).ravel(),
            range(self.geometry.n_layers),
        )
        return np.concatenate(out)

    def fit(self, c: np.ndarray) -> np.ndarray:
        """Mirror shapes from coefficients: ``W^-1`` then resampling onto each DM grid."""
        layers = self.coeff_to_layers(c)
        out = []
        for m, (layer, t) in enumerate(zip(layers, self._fit_tables)):
            n = self.geometry.dms[m].n_act
            a = np.zeros((n, n))
            _gather_add(layer, a, t.iy, t.wy, t.ix, t.wx)
            out.append(a.ravel())
        return np.concatenate(out)

    def new_state(self) -> ReconstructorState:
        return ReconstructorState.zeros(self.geometry)

    def pcg_solve(self, state: ReconstructorState, r_bar: np.ndarray, max_iter: int | None = None, rho_log=None):
        return pcg_solve(
            state, r_bar, self.preconditioner,
            self.geometry.pcg_max_iter if max_iter is None else max_iter,
            self.apply_M, self.geometry.pcg_tolerance, rho_log, self.geometry.pcg_carry_direction,
        )

    def pseudo_open_loop(self, measurements: np.ndarray, state: ReconstructorState) -> np.ndarray:
        if self.geometry.loop_mode == "closed":
            return measurements + self.ops.dm_measurements(state.a_prev2)
        return measurements

    def reconstruct_step(self, state: ReconstructorState, measurements: np.ndarray, max_iter: int | None = None) -> np.ndarray:
        """One loop step; updates ``state`` in place and returns ``a^(1)``."""
        geo = self.geometry
        tel = StepTelemetry(step=state.step)
        for k in self.timings:
            self.timings[k] = 0.0
        t0 = time.perf_counter()
        s = self.pseudo_open_loop(measurements, state)
        b1 = self.build_rhs(s)
        r_bar = (b1 - state.b_prev) + state.r_prev
        tp = time.perf_counter()
        c1, r1 = self.pcg_solve(state, r_bar, max_iter, tel.rho)
        tel.pcg = time.perf_counter() - tp
        a_tilde = self.fit(c1)
        if geo.loop_mode == "closed":
            a1 = state.a_prev + geo.gain * (a_tilde - state.a_prev2)
        else:
            a1 = (1.0 - geo.gain) * state.a_prev + geo.gain * a_tilde
        state.c_prev, state.b_prev, state.r_prev = c1, b1, r1
        state.a_prev2, state.a_prev = state.a_prev, a1
        state.step += 1
        tel.total = time.perf_counter() - t0
        tel.stage1, tel.stage2, tel.stage3 = (self.timings[k] for k in ("stage1", "stage2", "stage3"))
        self.telemetry.append(tel)
        log.debug("step %d: rho=%s total=%.3f ms", tel.step, tel.rho, 1e3 * tel.total)
        return a1
