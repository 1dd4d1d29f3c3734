"""Command-line front end.

Subcommands: run a scenario, sweep a (space %, time %) grid, run the
exact-enumeration verification suite, emit a synthetic trace, or dump an
ODE trajectory. All outputs are plain CSV with '.' decimals and LF line
endings; identical config + seed reproduces byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np
import yaml

from slotshift import dynamics, simulate, verify
from slotshift.pricing import CapacityError
from slotshift.simulate import ConfigError, ScenarioConfig, parse_config
from slotshift.traffic import TraceError, generate_synthetic_trace, write_trace

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _atomic_write_csv(path, header, rows):
    """Write rows via a temp file + rename so partial files never appear."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".12g")
    return str(x)


def _load_config(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}")
    return parse_config(raw or {})


def _apply_overrides(config: ScenarioConfig, args) -> ScenarioConfig:
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def _write_run_outputs(out_dir, summary, config):
    rows = []
    for res in summary.results:
        for day, (cost, v) in enumerate(zip(res.daily_cost, res.sum_v)):
            rows.append([res.repeat_index, day, _fmt(float(cost)), _fmt(float(v))])
    _atomic_write_csv(os.path.join(out_dir, "runs.csv"),
                      ["repeat", "day", "total_cost", "sumV"], rows)
    _atomic_write_csv(
        os.path.join(out_dir, "summary.csv"),
        ["scenario", "mean_reduction", "cov", "two_sigma", "theoretical_max", "cell"],
        [["run", _fmt(summary.mean_reduction), _fmt(summary.cov),
          _fmt(summary.two_sigma), _fmt(summary.theoretical_max), summary.cell]])
    final = summary.results[-1]
    windows = len(final.final_prices) // config.tpg.tpg_count
    price_rows = []
    for slot, price in enumerate(final.final_prices):
        price_rows.append([slot // windows, slot % windows, _fmt(float(price))])
    _atomic_write_csv(os.path.join(out_dir, "prices.csv"),
                      ["tpg", "window", "price"], price_rows)


def cmd_run(args) -> int:
    config = _apply_overrides(_load_config(args.config), args)
    print(f"effective seed: {config.seed}")
    summary = simulate.repeat_and_summarize(config)
    _write_run_outputs(args.out, summary, config)
    print(f"mean reduction {summary.cell} over {len(summary.results)} repeats")
    return EXIT_OK


def _grid_cell(payload):
    config_dict, space_pct, time_pct = payload
    config = parse_config(config_dict)
    cell_choice = replace(config.choice, n_t=1.0, n_s=1.0,
                          mu_t=time_pct / 100.0, mu_s=space_pct / 100.0)
    config = replace(config, choice=cell_choice)
    summary = simulate.repeat_and_summarize(config)
    return (space_pct, time_pct, summary.mean_reduction, summary.cov,
            summary.two_sigma, summary.theoretical_max, summary.cell, "")


def _config_to_dict(config: ScenarioConfig) -> dict:
    """Round-trip a config through plain data for process pools."""
    return {
        "seed": config.seed, "repeats": config.repeats,
        "sample_users": config.sample_users,
        "trace": {
            "source": config.trace.source, "path": config.trace.path,
            "window_length": config.trace.window_length, "users": config.trace.users,
            "days": config.trace.days, "windows_per_day": config.trace.windows_per_day,
            "peak_hour": config.trace.diurnal_peak_hour,
            "peak_to_trough_ratio": config.trace.peak_to_trough_ratio,
            "user_size_shape": config.trace.user_size_shape,
            "mean_daily_bytes": config.trace.mean_daily_bytes,
            "trace_seed": config.trace.trace_seed,
        },
        "tpg": {"count": config.tpg.tpg_count, "peak_hours": list(config.tpg.peak_hours),
                "equal_fraction": config.tpg.equal_fraction},
        "pricing": {
            "base_rate": config.pricing.base_rate, "ratios": list(config.pricing.ratios),
            "price_function": config.pricing.price_function,
            "sample_count": config.pricing.sample_count, "sigma": config.pricing.sigma,
            "schemes": list(config.pricing.schemes) if config.pricing.schemes else None,
        },
        "choice": {
            "n_t": config.choice.n_t, "n_s": config.choice.n_s,
            "mu_t": config.choice.mu_t, "mu_s": config.choice.mu_s,
            "max_delay_windows": config.choice.max_delay_windows,
            "tpgs_available": (list(config.choice.tpgs_available)
                               if config.choice.tpgs_available else None),
            "assignment": config.choice.assignment_policy,
        },
        "days": {"warmup": config.days.warmup, "run": config.days.run,
                 "freeze_tail": config.days.freeze_tail,
                 "eval_head": config.days.eval_head,
                 "source": config.days.day_source},
    }


def cmd_grid(args) -> int:
    config = _apply_overrides(_load_config(args.config), args)
    print(f"effective seed: {config.seed}")
    space_levels = [float(x) for x in args.space_levels.split(",")]
    time_levels = [float(x) for x in args.time_levels.split(",")]
    if not space_levels or not time_levels:
        raise ConfigError("grid level lists must be nonempty")
    config_dict = _config_to_dict(config)
    payloads = [(config_dict, s, t) for s in space_levels for t in time_levels]

    rows = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_grid_cell, p) for p in payloads]
            for payload, fut in zip(payloads, futures):
                try:
                    rows.append(fut.result())
                except Exception as exc:  # cell failures stay in-row
                    rows.append((payload[1], payload[2], "", "", "", "", "", str(exc)))
    else:
        for payload in payloads:
            try:
                rows.append(_grid_cell(payload))
            except Exception as exc:
                rows.append((payload[1], payload[2], "", "", "", "", "", str(exc)))

    out_rows = [[_fmt(r[0]), _fmt(r[1])] + [(_fmt(v) if v != "" else "") for v in r[2:6]]
                + [r[6], r[7]] for r in rows]
    _atomic_write_csv(os.path.join(args.out, "grid.csv"),
                      ["space_pct", "time_pct", "mean_reduction", "cov", "two_sigma",
                       "theoretical_max", "cell", "error"], out_rows)
    print(f"wrote {len(rows)} grid cells")
    return EXIT_RUNTIME if any(r[7] for r in rows) and args.strict else EXIT_OK


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    print(f"effective seed: {seed}")
    checks = verify.run_all(seed)
    for check in checks:
        print(check.line())
    return EXIT_OK if all(c.passed for c in checks) else EXIT_RUNTIME


def cmd_synth(args) -> int:
    trace = generate_synthetic_trace(
        users=args.users, days=args.days, windows_per_day=args.windows,
        diurnal_peak_hour=args.peak_hour, peak_to_trough_ratio=args.ratio,
        user_size_shape=args.shape, seed=args.seed if args.seed is not None else 0,
        mean_daily_bytes=args.mean_daily_bytes)
    os.makedirs(os.path.dirname(os.path.abspath(args.out_file)) or ".", exist_ok=True)
    write_trace(trace, args.out_file)
    print(f"effective seed: {args.seed if args.seed is not None else 0}")
    print(f"wrote {trace.users} users x {trace.days} days to {args.out_file}")
    return EXIT_OK


def cmd_ode(args) -> int:
    """Integrate the built-in capped/flat three-slot instance and dump the
    trajectory (step, choice_set, V, slot, s)."""
    sets = [dynamics.ChoiceSet(id=0, slots=np.array([0, 1]), demand=8.0),
            dynamics.ChoiceSet(id=1, slots=np.array([1, 2]), demand=8.0)]
    flows0 = [np.array([8.0, 0.0]), np.array([0.0, 8.0])]
    cap, alpha, linear_price = 20.0, 0.5, 0.4

    def price_fn(flows):
        load = np.zeros(3)
        for cs, x in zip(sets, flows):
            load[cs.slots] += x
        free = alpha * cap
        capped = np.where(load[:2] < free, 0.0,
                          (1 - alpha) * cap / np.square(cap - load[:2]))
        return np.array([capped[0], capped[1], linear_price])

    result = dynamics.integrate(sets, flows0, price_fn, step=args.h,
                                max_steps=args.max_steps, eps=1e-6,
                                sample_every=args.sample_every)
    rows = []
    for step, flows in result.samples:
        prices = price_fn(flows)
        v_per_set = dynamics.lyapunov(sets, flows, prices)
        for cs, x, v in zip(sets, flows, v_per_set):
            d = x.sum()
            for slot, flow in zip(cs.slots, x):
                share = flow / d if d > 0 else 0.0
                rows.append([step, cs.id, _fmt(float(v)), int(slot), _fmt(float(share))])
    _atomic_write_csv(os.path.join(args.out, "ode.csv"),
                      ["step", "choice_set", "V", "slot", "s"], rows)
    status = "reached equilibrium" if result.reached_equilibrium else "hit step limit"
    print(f"{status} after {result.steps} steps; wrote {len(rows)} trajectory rows")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotshift",
        description="Slot pricing and stable day-to-day traffic shifting")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario with repeats")
    p_run.add_argument("--config", required=True, help="YAML scenario file")
    p_run.add_argument("--out", default="out", help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.set_defaults(func=cmd_run)

    p_grid = sub.add_parser("grid", help="sweep space%% x time%% shifting levels")
    p_grid.add_argument("--config", required=True)
    p_grid.add_argument("--out", default="out")
    p_grid.add_argument("--seed", type=int, default=None)
    p_grid.add_argument("--space-levels", default="0,20,40,60",
                        help="comma list of space-shift percentages")
    p_grid.add_argument("--time-levels", default="0,10,20",
                        help="comma list of time-shift percentages")
    p_grid.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
    p_grid.add_argument("--strict", action="store_true",
                        help="exit nonzero if any cell failed")
    p_grid.set_defaults(func=cmd_grid)

    p_verify = sub.add_parser("verify", help="run the exact-enumeration oracle suite")
    p_verify.add_argument("--seed", type=int, default=None)
    p_verify.set_defaults(func=cmd_verify)

    p_synth = sub.add_parser("synth", help="generate a synthetic trace CSV")
    p_synth.add_argument("--users", type=int, default=1000)
    p_synth.add_argument("--days", type=int, default=7)
    p_synth.add_argument("--windows", type=int, default=24)
    p_synth.add_argument("--peak-hour", type=float, default=20.0)
    p_synth.add_argument("--ratio", type=float, default=4.0)
    p_synth.add_argument("--shape", type=float, default=1.0)
    p_synth.add_argument("--mean-daily-bytes", type=float, default=1e8)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--out-file", default="trace.csv")
    p_synth.set_defaults(func=cmd_synth)

    p_ode = sub.add_parser("ode", help="integrate the built-in ODE instance")
    p_ode.add_argument("--h", type=float, default=1e-3, help="Euler step")
    p_ode.add_argument("--max-steps", type=int, default=200_000)
    p_ode.add_argument("--sample-every", type=int, default=100)
    p_ode.add_argument("--out", default="out")
    p_ode.set_defaults(func=cmd_ode)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CapacityError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
