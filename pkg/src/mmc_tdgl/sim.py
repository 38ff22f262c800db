"""Simulation driver, output files, and the step-policy benchmark."""
from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mmc_tdgl.grid import Field2D, Grid2D, l2_norm
from mmc_tdgl.physics import AdmissibleBand, SimParams, total_energy, validate_params
from mmc_tdgl.schemes import SchemeKind, StepError, StepOptions, StepReport, step
from mmc_tdgl.stepper import (
    SNAP_SLACK,
    EnergyHistory,
    StepControl,
    StepMode,
    estimate_Uprime,
    next_dt,
    snap_to_events,
)

log = logging.getLogger(__name__)

DEFAULT_BENCH_TIMES = (1.0, 10.0, 100.0, 200.0)
DEFAULT_BENCH_POLICIES = ("const:0.05", "const:0.01", "const:0.005", "adaptive")


class ConfigError(ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class RunError(RuntimeError):
    """A step failed; carries what is needed to diagnose it."""

    def __init__(self, message: str, last_good: Field2D, t: float, records: list,
                 stats=None):
        super().__init__(message)
        self.last_good = last_good
        self.t = t
        self.records = records
        self.stats = stats


@dataclass(frozen=True)
class RunConfig:
    nx: int = 64
    ny: int = 64
    lx: float = 2 * math.pi
    ly: float = 2 * math.pi
    params: SimParams = field(default_factory=SimParams)
    scheme: SchemeKind = SchemeKind.LINEAR
    control: StepControl = field(default_factory=StepControl)
    mu_temperature_scaling: bool = False
    t_end: float = 1.0
    seed: int = 0
    init_mean: float = 0.65
    init_amp: float = 0.05
    snapshot_times: tuple[float, ...] = ()
    out_dir: str | None = None
    cg_tol: float = 1e-6
    cg_mode: str = "relative"
    cg_maxit: int = 0  # 0 means 10 * nx * ny
    newton_tol: float = 1e-8
    newton_maxit: int = 50
    jvp_eps: float = 1e-6
    band_lo: float | None = None
    band_hi: float | None = None
    band_policy: str = "strict"
    assertions: bool = False
    bench_reference_dt: float = 1e-4
    bench_policies: tuple[str, ...] = DEFAULT_BENCH_POLICIES
    bench_times: tuple[float, ...] = DEFAULT_BENCH_TIMES

    def problems(self) -> list[str]:
        out = []
        if self.nx < 4 or self.ny < 4:
            out.append(f"nx, ny: need at least 4, got {self.nx}, {self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            out.append(f"lx, ly: must be positive, got {self.lx}, {self.ly}")
        if not self.t_end >= 0:
            out.append(f"t_end: must be >= 0, got {self.t_end}")
        if self.init_amp < 0:
            out.append(f"init_amp: must be >= 0, got {self.init_amp}")
        try:
            band = self.band
        except ValueError as err:
            out.append(f"band_lo, band_hi: {err}")
        else:
            if band.hi >= 1.0 / self.params.rho:
                out.append(f"band_hi: {band.hi} must be below 1/rho = {1.0 / self.params.rho}")
            lo, hi = self.init_mean - self.init_amp, self.init_mean + self.init_amp
            if not (band.lo <= lo and hi <= band.hi):
                out.append(
                    f"init_mean, init_amp: [{lo}, {hi}] not inside band [{band.lo}, {band.hi}]"
                )
        if any(s < 0 or s > self.t_end for s in self.snapshot_times):
            out.append(f"snapshot_times: must lie in [0, t_end={self.t_end}]")
        if list(self.snapshot_times) != sorted(self.snapshot_times):
            out.append("snapshot_times: must be sorted")
        if self.cg_tol <= 0:
            out.append(f"cg_tol: must be positive, got {self.cg_tol}")
        if self.cg_mode not in ("relative", "absolute"):
            out.append(f"cg_mode: unknown mode {self.cg_mode!r} (relative|absolute)")
        if self.cg_maxit < 0:
            out.append(f"cg_maxit: must be >= 0, got {self.cg_maxit}")
        if self.newton_tol <= 0:
            out.append(f"newton_tol: must be positive, got {self.newton_tol}")
        if self.newton_maxit < 1:
            out.append(f"newton_maxit: must be >= 1, got {self.newton_maxit}")
        if self.jvp_eps <= 0:
            out.append(f"jvp_eps: must be positive, got {self.jvp_eps}")
        if self.band_policy not in ("strict", "clamp"):
            out.append(f"band_policy: unknown policy {self.band_policy!r} (strict|clamp)")
        if self.bench_reference_dt <= 0:
            out.append(f"bench_reference_dt: must be positive, got {self.bench_reference_dt}")
        for pol in self.bench_policies:
            try:
                policy_control(pol, self.control)
            except ValueError as err:
                out.append(f"bench_policies: {err}")
        return out

    def validate(self) -> RunConfig:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def grid(self) -> Grid2D:
        return Grid2D(self.nx, self.ny, self.lx, self.ly)

    @property
    def band(self) -> AdmissibleBand:
        default = AdmissibleBand.default(self.params)
        lo = default.lo if self.band_lo is None else self.band_lo
        hi = default.hi if self.band_hi is None else self.band_hi
        return AdmissibleBand(lo, hi)

    def step_options(self) -> StepOptions:
        return StepOptions(
            cg_tol=self.cg_tol,
            cg_mode=self.cg_mode,
            cg_maxit=self.cg_maxit or None,
            newton_tol=self.newton_tol,
            newton_maxit=self.newton_maxit,
            jvp_eps=self.jvp_eps,
            band=self.band,
            band_policy=self.band_policy,
            check_stability=self.assertions,
        )

    def effective_control(self) -> StepControl:
        if self.mu_temperature_scaling:
            return self.control.with_temperature_scaling(self.params.temp)
        return self.control

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)


ENERGY_COLUMNS = (
    "t", "dt", "U", "U_per_volume", "l2_norm", "mean_phi", "min_phi", "max_phi",
    "cg_iters", "newton_iters", "fallback",
)


@dataclass(frozen=True)
class EnergyRecord:
    t: float
    dt: float
    U: float
    U_per_volume: float
    l2_norm: float
    mean_phi: float
    min_phi: float
    max_phi: float
    cg_iters: int = 0
    newton_iters: int = 0
    fallback_used: bool = False

    @classmethod
    def from_state(cls, f: Field2D, t: float, dt: float, energy: float,
                   report: StepReport | None = None) -> EnergyRecord:
        v = f.values
        return cls(
            t=t, dt=dt, U=energy, U_per_volume=energy / f.grid.area, l2_norm=l2_norm(f),
            mean_phi=float(np.mean(v)), min_phi=float(v.min()), max_phi=float(v.max()),
            cg_iters=report.solver.iterations if report else 0,
            newton_iters=report.newton_iterations if report else 0,
            fallback_used=bool(report.solver.fallback_used) if report else False,
        )

    def row(self) -> list[str]:
        floats = (self.t, self.dt, self.U, self.U_per_volume, self.l2_norm,
                  self.mean_phi, self.min_phi, self.max_phi)
        return [repr(float(x)) for x in floats] + [
            str(self.cg_iters), str(self.newton_iters), str(int(self.fallback_used))
        ]


def init_field(grid: Grid2D, mean: float, amp: float, seed: int,
               band: AdmissibleBand | None = None) -> Field2D:
    """Uniform noise of half-width ``amp`` around ``mean``, shifted to have mean exactly ``mean``."""
    if band is not None and not (band.lo <= mean - amp and mean + amp <= band.hi):
        raise ConfigError(f"initial range [{mean - amp}, {mean + amp}] leaves band [{band.lo}, {band.hi}]")
    if amp == 0:
        return grid.constant(mean)
    rng = np.random.default_rng(seed)
    values = mean + amp * rng.uniform(-1.0, 1.0, size=grid.shape)
    values += mean - np.mean(values)
    if band is not None and not np.all(band.contains(values)):
        raise ConfigError("mean-corrected initial field leaves the admissible band")
    return Field2D(grid, values)


def relative_error(a: Field2D, b: Field2D) -> float:
    """Grid-weighted L2 distance ``||a - b||_h``.

    Called "relative" for historical reasons: it is not divided by ``||b||_h``.
    """
    return l2_norm(a - b)


def snapshot_name(t: float, ext: str) -> str:
    return f"phi_t{t:.6f}.{ext}"


def write_snapshot(f: Field2D, t: float, directory) -> tuple[Path, Path]:
    """Write ``phi_t<t>.csv`` (ny rows of nx values) and an 8-bit ``.pgm``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    csv_path = d / snapshot_name(t, "csv")
    pgm_path = d / snapshot_name(t, "pgm")
    try:
        with open(csv_path, "w", newline="") as fh:
            for row in f.values:
                fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
        # round half down, so 0.5 maps to 127
        pix = np.ceil(255.0 * np.clip(f.values, 0.0, 1.0) - 0.5).astype(np.uint8)
        with open(pgm_path, "wb") as fh:
            fh.write(f"P5\n{f.grid.nx} {f.grid.ny}\n255\n".encode("ascii"))
            fh.write(pix.tobytes())
    except OSError as err:
        raise OSError(f"cannot write snapshot to {d}: {err}") from err
    return csv_path, pgm_path


def read_snapshot(path, grid: Grid2D | None = None) -> Field2D:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(x) for x in line.split(",")])
    values = np.array(rows, dtype=np.float64)
    if grid is None:
        grid = Grid2D(values.shape[1], values.shape[0])
    return Field2D(grid, values)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    nx, ny = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(ny, nx)


def write_energy_log(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENERGY_COLUMNS)
        for rec in records:
            w.writerow(rec.row())


def read_energy_log(path) -> list[EnergyRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EnergyRecord(
                *(float(row[c]) for c in ENERGY_COLUMNS[:8]),
                int(row["cg_iters"]), int(row["newton_iters"]), row["fallback"] == "1",
            ))
    return out


@dataclass
class RunResult:
    final: Field2D
    records: list[EnergyRecord]
    snapshots: dict[float, Field2D]

    @property
    def steps(self) -> int:
        return len(self.records) - 1


def run(cfg: RunConfig, out_dir=None, *, keep_snapshots: bool = True) -> RunResult:
    """Integrate from the seeded initial field to ``cfg.t_end``.

    Snapshots are taken at t=0, every ``snapshot_times`` entry, and ``t_end``;
    steps are shortened to land exactly on them. If ``out_dir`` (or
    ``cfg.out_dir``) is set, ``config.echo``, ``energy.csv`` and the snapshot
    files are written there.
    """
    from mmc_tdgl.cli import format_config  # config echo lives with the parser

    cfg.validate()
    p = cfg.params
    band = cfg.band
    report = validate_params(p, band)
    if not report.ok:
        raise ConfigError(f"parameters give negative G over the band: {report}")

    out = out_dir if out_dir is not None else cfg.out_dir
    out = Path(out) if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.echo").write_text(format_config(cfg))

    grid = cfg.grid
    ctrl = cfg.effective_control()
    opts = cfg.step_options()
    phi = init_field(grid, cfg.init_mean, cfg.init_amp, cfg.seed, band)
    t = 0.0
    energy = total_energy(phi, p)
    records = [EnergyRecord.from_state(phi, t, 0.0, energy)]
    history = EnergyHistory(maxlen=ctrl.window + 1)
    history.append(t, energy)

    snap_set = set(cfg.snapshot_times) | {0.0, cfg.t_end}
    events = sorted(s for s in snap_set if s > 0)
    snapshots: dict[float, Field2D] = {}

    def emit(f: Field2D, at: float) -> None:
        if keep_snapshots:
            snapshots[at] = f
        if out:
            write_snapshot(f, at, out)

    emit(phi, 0.0)
    # constant steps are laid out as anchor + k*dt so rounding cannot accumulate
    anchor, k = 0.0, 0
    try:
        while t < cfg.t_end:
            if ctrl.mode is StepMode.ADAPTIVE:
                dt = next_dt(t, estimate_Uprime(history, ctrl.window), ctrl)
            else:
                dt = anchor + (k + 1) * ctrl.dt - t
            dt = snap_to_events(dt, t, events)
            t_next = t + dt
            landed = next((ev for ev in events if ev > t and abs(ev - t_next) <= SNAP_SLACK * dt), None)
            if landed is not None:
                t_next = landed
                anchor, k = landed, 0
            else:
                k += 1
            try:
                new, rep = step(cfg.scheme, phi, dt, p, opts)
            except StepError as err:
                raise RunError(f"step at t={t!r} with dt={dt!r} failed: {err}", phi, t, records,
                               err.stats) from err
            records.append(EnergyRecord.from_state(new, t_next, dt, rep.energy_after, rep))
            log.debug("t=%.6g dt=%.3g U=%.10g mean drift=%.3e cg=%d", t_next, dt, rep.energy_after,
                      records[-1].mean_phi - records[-2].mean_phi, rep.solver.iterations)
            phi, t = new, t_next
            history.append(t, rep.energy_after)
            if landed is not None and landed in snap_set:
                emit(phi, t)
    except RunError as err:
        if out:
            write_energy_log(err.records, out / "energy.csv")
            write_snapshot(err.last_good, err.t, out / "last_good")
            (out / "failure.txt").write_text(
                f"{err}\nlast good t = {err.t!r}\nsolver stats = {err.stats}\n\n{format_config(cfg)}"
            )
        raise
    if out:
        write_energy_log(records, out / "energy.csv")
    return RunResult(phi, records, snapshots)


# ---------------------------------------------------------------- benchmark


def policy_control(policy: str, base: StepControl) -> StepControl:
    """``const:<dt>`` or ``adaptive`` (using the adaptive constants of ``base``)."""
    name, _, arg = policy.partition(":")
    if name == "const":
        try:
            dt = float(arg)
        except ValueError:
            raise ValueError(f"bad constant step in policy {policy!r}") from None
        if not dt > 0:
            raise ValueError(f"non-positive step in policy {policy!r}")
        return StepControl.constant(dt)
    if name == "adaptive" and not arg:
        return dataclasses.replace(base, mode=StepMode.ADAPTIVE)
    raise ValueError(f"unknown policy {policy!r} (const:<dt> | adaptive)")


@dataclass
class BenchRow:
    policy: str
    steps: int
    wall_seconds: float
    errors: dict[float, float]
    failed: str | None = None
    records: list[EnergyRecord] = field(default_factory=list, repr=False)

    @property
    def per_step_seconds(self) -> float:
        return self.wall_seconds / self.steps if self.steps else 0.0


def _timed_run(cfg: RunConfig) -> tuple[RunResult, float]:
    start = time.monotonic()
    res = run(cfg)
    return res, time.monotonic() - start


def thread_cap() -> int:
    raw = os.environ.get("MMC_TDGL_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MMC_TDGL_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else (os.cpu_count() or 1)


def bench(cfg: RunConfig, policies=None, times=None, reference_dt: float | None = None,
          workers: int | None = None) -> list[BenchRow]:
    """Run a constant-step reference, then every candidate policy, and report
    step counts, wall time and the L2 distance to the reference at ``times``.

    Times beyond ``cfg.t_end`` are skipped. A failing candidate yields a row
    with ``failed`` set; the others still run.
    """
    policies = tuple(cfg.bench_policies if policies is None else policies)
    times = tuple(cfg.bench_times if times is None else times)
    times = tuple(sorted(x for x in times if 0 < x <= cfg.t_end))
    ref_dt = cfg.bench_reference_dt if reference_dt is None else reference_dt
    base = cfg.replace(snapshot_times=times, out_dir=None)

    ref_cfg = base.replace(control=StepControl.constant(ref_dt))
    ref, ref_wall = _timed_run(ref_cfg)
    rows = [BenchRow(f"reference:const:{ref_dt:g}", ref.steps, ref_wall,
                     {x: 0.0 for x in times}, records=ref.records)]

    def one(policy: str) -> BenchRow:
        cand = base.replace(control=policy_control(policy, cfg.control))
        try:
            res, wall = _timed_run(cand)
        except (RunError, ConfigError) as err:
            log.warning("bench policy %s failed: %s", policy, err)
            return BenchRow(policy, -1, math.nan, {x: math.nan for x in times}, str(err))
        errs = {x: relative_error(res.snapshots[x], ref.snapshots[x]) for x in times}
        return BenchRow(policy, res.steps, wall, errs, records=res.records)

    n = workers if workers is not None else thread_cap()
    if n <= 1 or len(policies) <= 1:
        rows += [one(pol) for pol in policies]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=n) as pool:
            rows += list(pool.map(one, policies))
    return rows


def bench_columns(times) -> list[str]:
    return ["policy", "steps", "wall_seconds"] + [f"re_t{x:g}" for x in times]


def write_bench_table(rows: list[BenchRow], times, path) -> None:
    times = tuple(times)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(bench_columns(times))
        for r in rows:
            name = r.policy if r.failed is None else f"{r.policy} (failed)"
            w.writerow([name, r.steps, repr(r.wall_seconds)]
                       + [repr(r.errors.get(x, math.nan)) for x in times])
