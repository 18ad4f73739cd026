"""Dense-oracle, adjoint and SPD verification of the matrix-free operators.

Every dense oracle here is assembled from the defining formula of its
operator (stencil, bilinear hat functions, per-level periodic filter
matrices), never by probing the matrix-free code, so a shared bug cannot
make both sides agree.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import SystemGeometry
from .operators import (
    TomographyOperators,
    noise_weight_apply,
    preconditioner_build,
    regularizer_apply,
    regularizer_build,
)
from .reconstructor import Reconstructor
from .wavelet import daubechies_filter, dwt_forward, dwt_inverse, dwt_inverse_transposed, highpass_filter

DEFAULT_SIZE_CAP = 20_000
ORACLE_TOL = 1e-10
ADJOINT_TOL = 1e-12
LINEARITY_TOL = 1e-12
SPD_TOL = 1e-10


# -- dense oracles ----------------------------------------------------------------


def dense_sh(mask: np.ndarray) -> np.ndarray:
    """Gamma for one WFS: rows ``[s_x, s_y]`` raveled, columns the ``(n+1)^2`` nodes."""
    n = mask.shape[0]
    node = lambda i, j: i * (n + 1) + j  # noqa: E731
    G = np.zeros((2 * n * n, (n + 1) ** 2))
    for i in range(n):
        for j in range(n):
            if not mask[i, j]:
                continue
            rx, ry = i * n + j, n * n + i * n + j
            G[rx, node(i, j + 1)] += 0.5
            G[rx, node(i, j)] -= 0.5
            G[rx, node(i + 1, j + 1)] += 0.5
            G[rx, node(i + 1, j)] -= 0.5
            G[ry, node(i + 1, j)] += 0.5
            G[ry, node(i, j)] -= 0.5
            G[ry, node(i + 1, j + 1)] += 0.5
            G[ry, node(i, j + 1)] -= 0.5
    return G


def _hat_matrix(points: np.ndarray, nodes: np.ndarray, spacing: float) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(points[:, None] - nodes[None, :]) / spacing)


def dense_interp(aperture, source, direction, scale: float, height: float) -> np.ndarray:
    """Bilinear sampling matrix as a Kronecker product of 1D hat-function weights."""
    x = aperture.coords
    wy = _hat_matrix(scale * x + direction[1] * height, source.coords, source.spacing)
    wx = _hat_matrix(scale * x + direction[0] * height, source.coords, source.spacing)
    if not (np.allclose(wy.sum(1), 1.0) and np.allclose(wx.sum(1), 1.0)):
        raise ValueError("dense oracle: evaluation points leave the source grid")
    return np.kron(wy, wx)


def dense_propagation(geometry: SystemGeometry) -> np.ndarray:
    """P: stacked WFS aperture nodes by concatenated layer nodes."""
    rows = []
    for g, star in enumerate(geometry.guide_stars):
        ap = geometry.aperture_grid(g)
        rows.append(np.hstack([
            dense_interp(ap, geometry.layer_grid(ell), star.direction, star.cone_scale(layer.height), layer.height)
            for ell, layer in enumerate(geometry.layers)
        ]))
    return np.vstack(rows)


def _block_diag(blocks: list[np.ndarray]) -> np.ndarray:
    out = np.zeros((sum(b.shape[0] for b in blocks), sum(b.shape[1] for b in blocks)))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def dense_gamma(geometry: SystemGeometry) -> np.ndarray:
    return _block_diag([dense_sh(geometry.active_mask(g)) for g in range(geometry.n_wfs)])


def periodic_analysis_matrix(m: int, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """One periodic analysis level: low-pass rows on top, high-pass rows below."""
    A = np.zeros((m, m))
    for k in range(m // 2):
        for t in range(len(h)):
            A[k, (2 * k + t) % m] += h[t]
            A[m // 2 + k, (2 * k + t) % m] += g[t]
    return A


def dense_dwt(order_j: int, wavelet_order: int) -> np.ndarray:
    """Full-depth 2D DWT on raveled ``2^J x 2^J`` grids from per-level Kronecker products."""
    n = 2**order_j
    h = daubechies_filter(wavelet_order)
    g = highpass_filter(h)
    flat = np.arange(n * n).reshape(n, n)
    W = np.eye(n * n)
    m = n
    while m > 1:
        A = periodic_analysis_matrix(m, h, g)
        level = np.eye(n * n)
        idx = flat[:m, :m].ravel()
        level[np.ix_(idx, idx)] = np.kron(A, A)
        W = level @ W
        m //= 2
    return W


def dense_system(geometry: SystemGeometry) -> dict[str, np.ndarray]:
    """Dense Gamma, P, C^-1, W, W^-1, alpha D, M and the RHS map ``s -> b``."""
    G = dense_gamma(geometry)
    P = dense_propagation(geometry)
    Cinv = np.diag(np.concatenate([np.full(2 * w.n_subap**2, 1.0 / w.noise_variance) for w in geometry.wfs_list]))
    W = _block_diag([dense_dwt(layer.grid_order, geometry.wavelet_order) for layer in geometry.layers])
    Winv = np.linalg.inv(W)
    aD = np.diag(geometry.regularization_alpha * regularizer_build(geometry))
    A = G @ P
    rhs = Winv.T @ A.T @ Cinv
    M = rhs @ A @ Winv + aD
    return {"Gamma": G, "P": P, "Cinv": Cinv, "W": W, "Winv": Winv, "alphaD": aD, "M": M, "rhs": rhs}


def probe(fn: Callable[[np.ndarray], np.ndarray], n_in: int) -> np.ndarray:
    """Assemble a matrix-free linear map column by column."""
    e = np.zeros(n_in)
    cols = []
    for k in range(n_in):
        e[k] = 1.0
        cols.append(np.asarray(fn(e), dtype=np.float64).ravel().copy())
        e[k] = 0.0
    return np.column_stack(cols)


# -- report -----------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{tag}  {self.name:<34s} error={self.error:.3e}  tol={self.tolerance:.0e}{extra}"


@dataclass
class VerifyReport:
    config_name: str
    checks: list[CheckResult] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def add(self, name: str, error: float, tolerance: float, detail: str = "", passed: bool | None = None) -> CheckResult:
        ok = bool(np.isfinite(error) and error <= tolerance) if passed is None else passed
        res = CheckResult(name, float(error), tolerance, ok, detail)
        self.checks.append(res)
        return res

    def format(self) -> str:
        lines = [f"verification of config {self.config_name!r}"]
        lines += [f"note: {n}" for n in self.notes]
        lines += [c.line() for c in self.checks]
        summary = "all checks passed" if self.ok else "FAILED: " + ", ".join(c.name for c in self.failed)
        lines.append(f"{summary} ({len(self.checks)} checks, {self.elapsed:.1f} s)")
        return "\n".join(lines)


# -- check helpers ----------------------------------------------------------------


def rel_matrix_error(A: np.ndarray, B: np.ndarray) -> float:
    scale = np.linalg.norm(B)
    return float(np.linalg.norm(A - B) / scale) if scale > 0 else float(np.linalg.norm(A))


def adjoint_error(fwd, adj, n_in: int, n_out: int, trials: int, rng: np.random.Generator) -> float:
    """Worst ``|<Ax,y> - <x,A^T y>| / (|Ax| |y|)`` over random trials."""
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(n_in)
        y = rng.standard_normal(n_out)
        ax = fwd(x)
        aty = adj(y)
        scale = np.linalg.norm(ax) * np.linalg.norm(y)
        if scale == 0.0:
            continue
        worst = max(worst, abs(float(ax @ y) - float(x @ aty)) / scale)
    return worst


def linearity_error(fn, n_in: int, trials: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(trials):
        x, y = rng.standard_normal(n_in), rng.standard_normal(n_in)
        a, b = rng.standard_normal(2)
        fx, fy = fn(x), fn(y)
        scale = abs(a) * np.linalg.norm(fx) + abs(b) * np.linalg.norm(fy)
        if scale == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(fn(a * x + b * y) - a * fx - b * fy) / scale))
    return worst


def spd_errors(apply_M, alpha_d: np.ndarray, trials: int, rng: np.random.Generator) -> tuple[float, float]:
    """Worst symmetry defect and worst positivity defect.

    Positivity is checked against the sharp lower bound ``<Mx,x> >= <alpha D x, x>``
    (the data term is positive semidefinite); the defect is how far the
    ratio falls below 1.
    """
    sym = 0.0
    pos = 0.0
    n = alpha_d.size
    for _ in range(trials):
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        mx, my = apply_M(x), apply_M(y)
        sym = max(sym, abs(float(mx @ y) - float(x @ my)) / (np.linalg.norm(mx) * np.linalg.norm(y)))
        ratio = float(mx @ x) / float(x @ (alpha_d * x))
        pos = max(pos, 1.0 - ratio)
    return sym, max(pos, 0.0)


# -- suite --------------------------------------------------------------------------


def _layer_vector_ops(rec: Reconstructor):
    """Whole-vector W, W^-1, W^-T over all layers."""
    ops = rec.ops
    geo = rec.geometry

    def per_layer(fn):
        return lambda v: np.concatenate([fn(b, geo.wavelet_order).ravel() for b in ops.split_layers(np.ascontiguousarray(v))])

    return per_layer(dwt_forward), per_layer(dwt_inverse), per_layer(dwt_inverse_transposed)


def run_verification(
    geometry: SystemGeometry,
    trials: int = 1000,
    spd_trials: int = 100,
    size_cap: int = DEFAULT_SIZE_CAP,
    seed: int = 0,
    threads: int | None = None,
) -> VerifyReport:
    """Oracle equivalence (when under ``size_cap``), adjoint, linearity and SPD checks."""
    t_start = time.perf_counter()
    report = VerifyReport(geometry.name or "<unnamed>")
    rng = np.random.default_rng(seed)
    with Reconstructor(geometry, threads=threads) as rec:
        ops: TomographyOperators = rec.ops
        n_c = geometry.n_coeffs
        n_s = geometry.n_measurements
        n_wave = sum(ap.n**2 for ap in ops.apertures)
        W_f, W_inv, W_invT = _layer_vector_ops(rec)

        gamma = lambda v: ops.gamma(ops.waves_split(v))  # noqa: E731
        gamma_t = lambda s: ops.waves_flat(ops.gamma_t(s))  # noqa: E731
        P = lambda x: ops.waves_flat(ops.P(x))  # noqa: E731
        P_t = lambda v: ops.P_t(ops.waves_split(v))  # noqa: E731
        cinv = lambda s: noise_weight_apply(s, geometry)  # noqa: E731
        alpha = geometry.regularization_alpha
        aD = lambda c: regularizer_apply(c, rec.reg, alpha)  # noqa: E731

        if n_c <= size_cap:
            dense = dense_system(geometry)
            pairs = [
                ("oracle Gamma", gamma, n_wave, dense["Gamma"]),
                ("oracle Gamma^T", gamma_t, n_s, dense["Gamma"].T),
                ("oracle P", P, n_c, dense["P"]),
                ("oracle P^T", P_t, n_wave, dense["P"].T),
                ("oracle W", W_f, n_c, dense["W"]),
                ("oracle W^-1", W_inv, n_c, dense["Winv"]),
                ("oracle W^-T", W_invT, n_c, dense["Winv"].T),
                ("oracle C^-1", cinv, n_s, dense["Cinv"]),
                ("oracle alpha D", aD, n_c, dense["alphaD"]),
                ("oracle M", rec.apply_M, n_c, dense["M"]),
                ("oracle b", rec.build_rhs, n_s, dense["rhs"]),
            ]
            for name, fn, n_in, mat in pairs:
                report.add(name, rel_matrix_error(probe(fn, n_in), mat), ORACLE_TOL)
            M = dense["M"]
            report.add("dense M symmetric", rel_matrix_error(M, M.T), SPD_TOL)
            lam_min = float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())
            report.add("dense M positive definite", 0.0 if lam_min > 0 else 1.0, SPD_TOL, f"lambda_min={lam_min:.3e}", passed=lam_min > 0)
            exact = preconditioner_build(geometry, rec.reg, rec.apply_M, mode="exact")
            report.add("exact preconditioner = diag(M)", float(np.max(np.abs(exact - np.diag(M)) / np.diag(M))), ORACLE_TOL)
        else:
            report.notes.append(
                f"dense oracle refused: coefficient dimension {n_c} exceeds size cap {size_cap}; running matrix-free checks only"
            )

        adjoints = [
            ("adjoint Gamma/Gamma^T", gamma, gamma_t, n_wave, n_s),
            ("adjoint P/P^T", P, P_t, n_c, n_wave),
            ("adjoint W^-1/W^-T", W_inv, W_invT, n_c, n_c),
        ]
        for name, f, a, n_in, n_out in adjoints:
            report.add(name, adjoint_error(f, a, n_in, n_out, trials, rng), ADJOINT_TOL, f"{trials} trials")

        lin_trials = max(1, min(trials, 20))
        for name, fn, n_in in [("linearity Gamma", gamma, n_wave), ("linearity P", P, n_c), ("linearity P^T", P_t, n_wave), ("linearity M", rec.apply_M, n_c)]:
            report.add(name, linearity_error(fn, n_in, lin_trials, rng), LINEARITY_TOL, f"{lin_trials} trials")

        sym, pos = spd_errors(rec.apply_M, rec.alpha_reg, spd_trials, rng)
        report.add("M symmetry", sym, SPD_TOL, f"{spd_trials} trials")
        report.add("M positivity", pos, SPD_TOL, f"{spd_trials} trials, <Mx,x> >= <aDx,x>")
    report.elapsed = time.perf_counter() - t_start
    return report
