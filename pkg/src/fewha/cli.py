"""Command-line entry point: ``verify``, ``bench``, ``simulate`` and ``plot``.

Exit codes: 0 success, 1 verification failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .atmosphere import generate_atmosphere, quality_csv, run_closed_loop, synthesize_measurements, write_quality_csv
from .config import ConfigError, SystemGeometry, WfsConfig, load_config, with_layers
from .operators import OutOfGridError
from .reconstructor import Reconstructor
from .verify import DEFAULT_SIZE_CAP, run_verification

log = logging.getLogger("fewha")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2

BENCH_COLUMNS = ["sweep_param", "value", "rep", "step_time_us", "stage1_us", "stage2_us", "stage3_us", "pcg_us"]
SWEEP_PARAMS = ("layers", "pcg_iters", "subapertures", "threads")


class InputError(ValueError):
    """Bad command-line input (sweep spec, CSV schema)."""


# -- bench ------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple[int, ...]
    repetitions: int = 5
    warmup: int = 10

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise InputError(f"unknown sweep parameter {self.param!r}; expected one of {', '.join(SWEEP_PARAMS)}")
        if not self.values:
            raise InputError("sweep needs at least one value")
        if self.repetitions < 3:
            raise InputError(f"repetitions must be >= 3, got {self.repetitions}")
        if self.warmup < 0:
            raise InputError("warmup must be >= 0")
        for v in self.values:
            if int(v) != v or v < 1:
                raise InputError(f"illegal {self.param} value {v!r}: must be a positive integer")


def sweep_point(base: SystemGeometry, param: str, value: int) -> tuple[SystemGeometry, int | None]:
    """Geometry and thread count for one sweep point."""
    if param == "layers":
        return with_layers(base, value), None
    if param == "pcg_iters":
        return base.replace(pcg_max_iter=value), None
    if param == "subapertures":
        # only the high-order sensors are resized; low-order NGS keep their size
        top = max(w.n_subap for w in base.wfs_list)
        wfs = tuple(WfsConfig(value, w.noise_variance) if w.n_subap == top else w for w in base.wfs_list)
        return base.replace(wfs_list=wfs), None
    if param == "threads":
        return base, value
    raise InputError(f"unknown sweep parameter {param!r}")


def bench_rows(base: SystemGeometry, sweep: SweepSpec, seed: int = 0, threads: int | None = None) -> list[list]:
    """Time ``reconstruct_step`` per sweep point; one row per timed repetition.

    Every point is built and warmed up first, then repetitions run
    round-robin over the points so slow phases of a shared host are spread
    across the whole sweep instead of landing on one point.
    """
    points = []
    try:
        for value in sweep.values:
            geo, point_threads = sweep_point(base, sweep.param, value)
            rec = Reconstructor(geo, threads=point_threads or threads)
            points.append((value, rec))
            s = synthesize_measurements(generate_atmosphere(geo, seed), None, rec.ops, noise_seed=seed + 1)
            state = rec.new_state()
            for _ in range(sweep.warmup):
                rec.reconstruct_step(state, s)
            points[-1] = (value, rec, state, s)
        rows = {value: [] for value in sweep.values}
        for rep in range(sweep.repetitions):
            for value, rec, state, s in points:
                t0 = time.perf_counter()
                rec.reconstruct_step(state, s)
                elapsed = time.perf_counter() - t0
                tel = rec.telemetry[-1]
                rows[value].append([
                    sweep.param, value, rep, round(1e6 * elapsed, 3),
                    round(1e6 * tel.stage1, 3), round(1e6 * tel.stage2, 3), round(1e6 * tel.stage3, 3), round(1e6 * tel.pcg, 3),
                ])
    finally:
        for point in points:
            point[1].close()
    log.info("bench %s done over %d points", sweep.param, len(points))
    return [row for value in sweep.values for row in rows[value]]


def bench_summary(rows: list[list]) -> list[tuple[str, int, float, float, float]]:
    """``(param, value, median_us, min_us, max_us)`` per sweep point."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        groups.setdefault((r[0], r[1]), []).append(float(r[3]))
    return [(p, v, statistics.median(t), min(t), max(t)) for (p, v), t in groups.items()]


def rows_to_csv(header: Sequence[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- plot -------------------------------------------------------------------------

_BENCH_SCRIPT = '''\
"""Step time versus swept parameter (generated by fewha plot)."""
import statistics

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

ROWS = {rows!r}
COLUMNS = ["step_time_us", "stage1_us", "stage2_us", "stage3_us", "pcg_us"]
LABELS = ["reconstruct_step", "stage 1 (W^-1)", "stage 2 (WFS)", "stage 3 (P^T, W^-T)", "PCG"]

params = sorted({{r["sweep_param"] for r in ROWS}})
fig, axes = plt.subplots(1, len(params), figsize=(5 * len(params), 4), squeeze=False)
for ax, param in zip(axes[0], params):
    sub = [r for r in ROWS if r["sweep_param"] == param]
    values = sorted({{r["value"] for r in sub}})
    for col, label in zip(COLUMNS, LABELS):
        med = [statistics.median(r[col] for r in sub if r["value"] == v) / 1e3 for v in values]
        ax.plot(values, med, marker="o", label=label)
    ax.set_xlabel(param)
    ax.set_ylabel("time per step [ms] (median)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
fig.tight_layout()
fig.savefig({png!r}, dpi=120)
print("wrote", {png!r})
'''

_QUALITY_SCRIPT = '''\
"""Residual RMS versus loop step (generated by fewha plot)."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

STEPS = {steps!r}
FIELD_RMS = {field!r}
DIRECTIONS = {dirs!r}
UNCORRECTED = {unc!r}

fig, ax = plt.subplots(figsize=(6, 4))
for series in DIRECTIONS:
    ax.plot(STEPS, series, color="0.75", linewidth=0.8)
ax.plot(STEPS, FIELD_RMS, marker="o", color="C0", label="field RMS")
if UNCORRECTED is not None:
    ax.axhline(UNCORRECTED, color="C3", linestyle="--", label="uncorrected")
ax.set_yscale("log")
ax.set_xlabel("loop step")
ax.set_ylabel("residual RMS [rad]")
ax.grid(True, which="both", alpha=0.3)
ax.legend()
fig.tight_layout()
fig.savefig({png!r}, dpi=120)
print("wrote", {png!r})
'''


def plot_script(csv_text: str, png_name: str) -> str:
    """Self-contained matplotlib script for a bench or quality CSV."""
    reader = csv.reader(io.StringIO(csv_text))
    header = next(reader, None)
    if header is None:
        raise InputError("no data rows")
    rows = [r for r in reader if r]
    if not rows:
        raise InputError("no data rows")
    if header == BENCH_COLUMNS:
        data = []
        for r in rows:
            if len(r) != len(header):
                raise InputError(f"schema mismatch: row {r!r} has {len(r)} fields, expected {len(header)}")
            rec = {"sweep_param": r[0], "value": int(r[1]), "rep": int(r[2])}
            rec.update({k: float(v) for k, v in zip(header[3:], r[3:])})
            data.append(rec)
        return _BENCH_SCRIPT.format(rows=data, png=png_name)
    if header and header[0] == "step" and header[-3:] == ["field_rms", "layer_error", "rho"]:
        dir_cols = [k for k, h in enumerate(header) if h.startswith("rms_dir")]
        unc = [r for r in rows if int(r[0]) < 0]
        loop = [r for r in rows if int(r[0]) >= 0]
        if not loop:
            raise InputError("no data rows")
        field_col = header.index("field_rms")
        return _QUALITY_SCRIPT.format(
            steps=[int(r[0]) for r in loop],
            field=[float(r[field_col]) for r in loop],
            dirs=[[float(r[k]) for r in loop] for k in dir_cols],
            unc=float(unc[0][field_col]) if unc else None,
            png=png_name,
        )
    raise InputError(f"schema mismatch: unrecognised CSV header {','.join(header)}")


# -- commands ---------------------------------------------------------------------


def _write(text: str, output: str | None) -> None:
    if output is None:
        sys.stdout.write(text)
    else:
        Path(output).write_text(text, encoding="utf-8")


def cmd_verify(args) -> int:
    geo = load_config(args.config)
    report = run_verification(geo, trials=args.trials, size_cap=args.size_cap, seed=args.seed, threads=args.threads)
    text = report.format() + "\n"
    print(text, end="")
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    return EXIT_OK if report.ok else EXIT_VERIFY_FAILED


def cmd_bench(args) -> int:
    geo = load_config(args.config)
    values = _parse_values(args.values) if args.values else _default_values(geo, args.sweep)
    sweep = SweepSpec(args.sweep, values, args.reps, args.warmup)
    rows = bench_rows(geo, sweep, seed=args.seed, threads=args.threads)
    _write(rows_to_csv(BENCH_COLUMNS, rows), args.output)
    out = sys.stdout if args.output else sys.stderr
    for p, v, med, lo, hi in bench_summary(rows):
        print(f"{p}={v}: median {med / 1e3:.3f} ms  [min {lo / 1e3:.3f}, max {hi / 1e3:.3f}]", file=out)
    return EXIT_OK


def _parse_values(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"illegal sweep values {text!r}: expected comma-separated integers") from None


def _default_values(geo: SystemGeometry, param: str) -> tuple[int, ...]:
    if param == "layers":
        return tuple(range(3, 10))
    if param == "pcg_iters":
        return (4, 8)
    if param == "threads":
        return (1, geo.default_threads)
    top = max(w.n_subap for w in geo.wfs_list)
    return tuple(sorted({max(2, top // 4), max(2, top // 2), top}))


def cmd_simulate(args) -> int:
    geo = load_config(args.config)
    if args.gain is not None:
        geo = geo.replace(gain=args.gain)
    result = run_closed_loop(geo, args.steps, seed=args.seed, noise_seed=args.noise_seed, noise=not args.noiseless, threads=args.threads)
    if args.output:
        write_quality_csv(result, args.output)
    else:
        sys.stdout.write(quality_csv(result))
    out = sys.stdout if args.output else sys.stderr
    print(f"final field RMS:       {result.final_rms:.6g} rad", file=out)
    print(f"uncorrected field RMS: {result.uncorrected.field_rms:.6g} rad", file=out)
    print(f"improvement factor:    {result.improvement:.6g}", file=out)
    return EXIT_OK


def cmd_plot(args) -> int:
    src = Path(args.csv)
    output = Path(args.output) if args.output else src.with_name(f"plot_{src.stem}.py")
    script = plot_script(src.read_text(encoding="utf-8"), str(output.with_suffix(".png")))
    output.write_text(script, encoding="utf-8")
    print(f"wrote {output}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d("mini"), help="config file or preset name (default: mini)")
    p.add_argument("--threads", type=int, default=d(None), help="parallelism degree N (default: max(L, W))")
    p.add_argument("--seed", type=int, default=d(0), help="random seed")
    p.add_argument("--output", default=d(None), help="output file (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewha", description="Wavelet-domain tomographic reconstructor tools")
    _common(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="dense-oracle, adjoint and SPD suite")
    _common(p, suppress=True)
    p.add_argument("--trials", type=int, default=1000, help="random trials per adjoint pair")
    p.add_argument("--size-cap", type=int, default=DEFAULT_SIZE_CAP, help="largest coefficient dimension for dense oracles")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="timing sweep of reconstruct_step")
    _common(p, suppress=True)
    p.add_argument("--sweep", choices=SWEEP_PARAMS, default="pcg_iters")
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--reps", type=int, default=5, help="timed repetitions per point (>= 3)")
    p.add_argument("--warmup", type=int, default=10, help="untimed warmup steps per point")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("simulate", help="closed-loop simulation, writes the quality CSV")
    _common(p, suppress=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--noise-seed", type=int, default=1)
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--gain", type=float, help="override the loop gain")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plot", help="emit a matplotlib script for a bench or quality CSV")
    _common(p, suppress=True)
    p.add_argument("csv", help="bench or quality CSV")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OutOfGridError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
