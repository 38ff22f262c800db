"""Command-line front end and the ``key = value`` config format.

Example config (every key is optional; omitted keys take the defaults)::

    # grid and model
    nx = 64
    temp = 50
    scheme = linear            # linear | nonlinear
    stepper = adaptive         # constant | adaptive
    lambda_table = 100:1, 200:1.5, 300:2, 400:3, 500:4, inf:5
    snapshot_times = 0.1, 1, 10
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from mmc_tdgl.grid import Grid2D
from mmc_tdgl.physics import SimParams, validate_params
from mmc_tdgl.schemes import SchemeKind, StepError
from mmc_tdgl.sim import (
    ConfigError,
    RunConfig,
    RunError,
    bench,
    read_snapshot,
    relative_error,
    run,
    snapshot_name,
    write_bench_table,
    write_energy_log,
)
from mmc_tdgl.stepper import StepControl, StepMode

log = logging.getLogger("mmc_tdgl")

_PARAM_KEYS = ("m0", "chi", "tau", "ncoef", "rho", "kb", "temp", "kcoef", "alpha", "beta")
_POSITIVE_PARAMS = tuple(k for k in _PARAM_KEYS if k != "chi")
_INT_KEYS = ("nx", "ny", "seed", "cg_maxit", "newton_maxit", "uprime_window")
_FLOAT_KEYS = _PARAM_KEYS + (
    "lx", "ly", "dt", "dt_min", "dt_max", "mu", "t_end", "init_mean", "init_amp",
    "cg_tol", "newton_tol", "jvp_eps", "bench_reference_dt",
)
_OPT_FLOAT_KEYS = ("band_lo", "band_hi")
_BOOL_KEYS = ("assertions", "mu_temperature_scaling")
_CHOICE_KEYS = {
    "scheme": ("linear", "nonlinear"),
    "stepper": ("constant", "adaptive"),
    "cg_mode": ("relative", "absolute"),
    "band_policy": ("strict", "clamp"),
}
_FLOAT_LIST_KEYS = ("snapshot_times", "bench_times")
_OTHER_KEYS = ("lambda_table", "bench_policies", "out_dir")
KNOWN_KEYS = (
    _INT_KEYS + _FLOAT_KEYS + _OPT_FLOAT_KEYS + _BOOL_KEYS + tuple(_CHOICE_KEYS)
    + _FLOAT_LIST_KEYS + _OTHER_KEYS
)

_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def _split_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _parse_value(key: str, text: str):
    if key in _INT_KEYS:
        return int(text)
    if key in _FLOAT_KEYS:
        return float(text)
    if key in _OPT_FLOAT_KEYS:
        return None if text.lower() in ("", "auto") else float(text)
    if key in _BOOL_KEYS:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected on/off, got {text!r}")
    if key in _CHOICE_KEYS:
        if text not in _CHOICE_KEYS[key]:
            raise ValueError(f"unknown {key} {text!r} (choose from {', '.join(_CHOICE_KEYS[key])})")
        return text
    if key in _FLOAT_LIST_KEYS:
        return tuple(float(s) for s in _split_list(text))
    if key == "lambda_table":
        pairs = []
        for item in _split_list(text):
            bound, sep, factor = item.partition(":")
            if not sep:
                raise ValueError(f"lambda_table entry {item!r} is not t_bound:factor")
            pairs.append((float(bound), float(factor)))
        return tuple(pairs)
    if key == "bench_policies":
        return tuple(_split_list(text))
    if key == "out_dir":
        return text or None
    raise KeyError(key)


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a validated RunConfig."""
    values: dict = {}
    problems: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            problems.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        if key not in KNOWN_KEYS:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in values:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = _parse_value(key, val)
        except ValueError as err:
            problems.append(f"line {lineno}: {key}: {err}")
    if problems:
        raise ConfigError(problems)
    return build_config(values)


def build_config(values: dict) -> RunConfig:
    problems = []
    defaults = RunConfig()
    pdefaults = SimParams()
    pvals = {k: values.get(k, getattr(pdefaults, k)) for k in _PARAM_KEYS}
    for k in _POSITIVE_PARAMS:
        if not pvals[k] > 0:
            problems.append(f"{k}: must be positive, got {pvals[k]}")

    cdefaults = StepControl()
    mode = StepMode(values.get("stepper", cdefaults.mode.value))
    ctrl_kwargs = dict(
        mode=mode,
        dt=values.get("dt", cdefaults.dt),
        dt_min=values.get("dt_min", cdefaults.dt_min),
        dt_max=values.get("dt_max", cdefaults.dt_max),
        mu=values.get("mu", cdefaults.mu),
        lambda_table=values.get("lambda_table", cdefaults.lambda_table),
        window=values.get("uprime_window", cdefaults.window),
    )
    control = None
    try:
        control = StepControl(**ctrl_kwargs)
    except ValueError as err:
        problems.append(f"stepper settings (dt, dt_min, dt_max, mu, lambda_table, uprime_window): {err}")

    simple = {
        k: values[k] for k in (
            "nx", "ny", "lx", "ly", "t_end", "seed", "init_mean", "init_amp", "snapshot_times",
            "out_dir", "cg_tol", "cg_mode", "cg_maxit", "newton_tol", "newton_maxit", "jvp_eps",
            "band_lo", "band_hi", "band_policy", "assertions", "mu_temperature_scaling",
            "bench_reference_dt", "bench_policies", "bench_times",
        ) if k in values
    }
    scheme = SchemeKind(values.get("scheme", defaults.scheme.value))
    if problems:
        # keep going with defaults in the broken slots so every problem is reported at once
        rest = defaults.replace(scheme=scheme, control=control or defaults.control, **simple)
        raise ConfigError(problems + rest.problems())
    cfg = defaults.replace(params=SimParams(**pvals), scheme=scheme, control=control, **simple)
    return cfg.validate()


def format_config(cfg: RunConfig) -> str:
    """Render every key; ``parse_config(format_config(c)) == c``."""
    p, c = cfg.params, cfg.control
    lines = ["# mmc-tdgl run configuration"]

    def put(key, val):
        lines.append(f"{key} = {val}")

    put("nx", cfg.nx)
    put("ny", cfg.ny)
    put("lx", _fmt(cfg.lx))
    put("ly", _fmt(cfg.ly))
    for k in _PARAM_KEYS:
        put(k, _fmt(getattr(p, k)))
    put("scheme", cfg.scheme.value)
    put("stepper", c.mode.value)
    put("dt", _fmt(c.dt))
    put("dt_min", _fmt(c.dt_min))
    put("dt_max", _fmt(c.dt_max))
    put("mu", _fmt(c.mu))
    put("lambda_table", ", ".join(f"{_fmt(b)}:{_fmt(f)}" for b, f in c.lambda_table))
    put("uprime_window", c.window)
    put("mu_temperature_scaling", "on" if cfg.mu_temperature_scaling else "off")
    put("t_end", _fmt(cfg.t_end))
    put("seed", cfg.seed)
    put("init_mean", _fmt(cfg.init_mean))
    put("init_amp", _fmt(cfg.init_amp))
    put("snapshot_times", ", ".join(_fmt(x) for x in cfg.snapshot_times))
    put("out_dir", cfg.out_dir or "")
    put("cg_tol", _fmt(cfg.cg_tol))
    put("cg_mode", cfg.cg_mode)
    put("cg_maxit", cfg.cg_maxit)
    put("newton_tol", _fmt(cfg.newton_tol))
    put("newton_maxit", cfg.newton_maxit)
    put("jvp_eps", _fmt(cfg.jvp_eps))
    put("band_lo", "auto" if cfg.band_lo is None else _fmt(cfg.band_lo))
    put("band_hi", "auto" if cfg.band_hi is None else _fmt(cfg.band_hi))
    put("band_policy", cfg.band_policy)
    put("assertions", "on" if cfg.assertions else "off")
    put("bench_reference_dt", _fmt(cfg.bench_reference_dt))
    put("bench_policies", ", ".join(cfg.bench_policies))
    put("bench_times", ", ".join(_fmt(x) for x in cfg.bench_times))
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config(text)


# ---------------------------------------------------------------- commands


def cmd_run(config: str, out: str) -> int:
    cfg = load_config(config)
    res = run(cfg, out)
    first, last = res.records[0], res.records[-1]
    print(f"steps: {res.steps}")
    print(f"t_end: {last.t!r}")
    print(f"energy: {first.U!r} -> {last.U!r}")
    print(f"l2_norm: {first.l2_norm!r} -> {last.l2_norm!r}")
    print(f"output: {out}")
    return 0


def _grid_for(directory: Path) -> Grid2D | None:
    echo = directory / "config.echo"
    if echo.exists():
        return parse_config(echo.read_text()).grid
    return None


def cmd_compare(a: str, b: str, at: float) -> int:
    da, db = Path(a), Path(b)
    grid = _grid_for(da)
    name = snapshot_name(at, "csv")
    try:
        fa = read_snapshot(da / name, grid)
        fb = read_snapshot(db / name, grid)
    except OSError as err:
        raise ConfigError(f"missing snapshot: {err}") from None
    print(repr(relative_error(fa, fb)))
    return 0


def cmd_bench(config: str, out: str) -> int:
    cfg = load_config(config)
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.echo").write_text(format_config(cfg))
    rows = bench(cfg)
    write_bench_table(rows, cfg.bench_times, d / "bench.csv")
    for r in rows:
        if r.records:
            tag = r.policy.replace(":", "_")
            write_energy_log(r.records, d / f"energy_{tag}.csv")
    width = max(len(r.policy) for r in rows)
    for r in rows:
        errs = "  ".join(f"t={x:g}: {e:.4g}" for x, e in sorted(r.errors.items()))
        status = f"FAILED ({r.failed})" if r.failed else errs
        print(f"{r.policy:<{width}}  steps={r.steps:<8d} wall={r.wall_seconds:8.2f}s  {status}")
    return 2 if any(r.failed for r in rows) else 0


def cmd_validate(config: str) -> int:
    cfg = load_config(config)
    report = validate_params(cfg.params, cfg.band)
    print(str(report) if not report.ok else "ok")
    if report.ok:
        print(f"min G = {report.g_min!r} at phi = {report.phi_at_min!r}")
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmc-tdgl", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one simulation")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="L2 distance between two runs' snapshots")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--time", required=True, type=float)

    p = sub.add_parser("bench", help="compare step policies against a fine reference")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate", help="check G >= 0 over the admissible band")
    p.add_argument("--config", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out)
        if args.command == "compare":
            return cmd_compare(args.a, args.b, args.time)
        if args.command == "bench":
            return cmd_bench(args.config, args.out)
        return cmd_validate(args.config)
    except ConfigError as err:
        for problem in err.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1
    except (RunError, StepError, OSError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
