"""Command-line entry point: single runs, the full grid and the two tuning harnesses."""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path

from .estimation import LapLog, TuningConfig, tune_process_covariance, write_q_file
from .harness import (MODES, ExperimentSpec, SimConfig, export_artifacts, record_tuning_lap,
                      run_experiment, run_grid, tune_driver_gain)
from .scenario import build_track
from .vehicle import read_key_values

# config-file sections and the SimConfig attribute each one overrides
SECTIONS = ("vehicle", "nmpc", "delays", "lookahead", "driver")
SIM_KEYS = ("max_time",)


def _coerce(template, raw: str):
    if isinstance(template, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    return raw


def load_config(path=None) -> SimConfig:
    """Build a ``SimConfig`` from a ``section.key = value`` file.

    Sections are vehicle, nmpc, delays, lookahead and driver; ``sim.max_time``
    sets the lap time limit.  Unknown keys are an error.
    """
    cfg = SimConfig()
    if path is None:
        return cfg
    grouped: dict[str, dict[str, str]] = {}
    for key, raw in read_key_values(path).items():
        if "." not in key:
            raise KeyError(f"{path}: key {key!r} needs a section prefix, e.g. nmpc.{key}")
        section, name = key.split(".", 1)
        grouped.setdefault(section, {})[name] = raw
    for section, values in grouped.items():
        if section == "sim":
            bad = set(values) - set(SIM_KEYS)
            if bad:
                raise KeyError(f"{path}: unknown sim key(s) {sorted(bad)}")
            cfg = replace(cfg, **{k: float(v) for k, v in values.items()})
            continue
        if section not in SECTIONS:
            raise KeyError(f"{path}: unknown section {section!r}; expected one of {SECTIONS}")
        current = getattr(cfg, section)
        known = {f.name for f in fields(current)}
        bad = set(values) - known
        if bad:
            raise KeyError(f"{path}: unknown {section} key(s) {sorted(bad)}")
        updates = {k: _coerce(getattr(current, k), v) for k, v in values.items()}
        cfg = replace(cfg, **{section: replace(current, **updates)})
    return cfg


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    track = build_track()
    spec = ExperimentSpec(args.mode, args.noise_set, args.delay, args.seed)
    run = run_experiment(spec, cfg, track)
    export_artifacts([run], args.out, track, plots=not args.no_plots, latency=args.latency)
    status = "diverged" if run.diverged else ("completed" if run.completed else "timed out")
    print(f"{spec.name}: {status} at s={run.s[-1]:.1f} m, t={run.t[-1]:.2f} s -> {args.out}")
    return 0 if run.completed and not run.diverged else 1


def cmd_grid(args) -> int:
    cfg = load_config(args.config)
    track = build_track()

    def progress(i, n, spec, run):
        status = "diverged" if run.diverged else "ok"
        print(f"[{i + 1}/{n}] {spec.name}: {status}", flush=True)

    runs = run_grid(args.seed, cfg, track, progress=progress)
    export_artifacts(runs, args.out, track, plots=not args.no_plots, latency=args.latency)
    bad = [r.spec.name for r in runs if r.diverged or not r.completed]
    if bad:
        print("runs that did not complete: " + ", ".join(bad), file=sys.stderr)
        return 1
    return 0


def cmd_tune_q(args) -> int:
    cfg = load_config(args.config)
    if args.log:
        lap = LapLog.from_csv(args.log)
    else:
        lap = record_tuning_lap(args.seed, cfg)
        if args.save_log:
            lap.to_csv(args.save_log)
    result = tune_process_covariance(lap, TuningConfig(maxiter=args.maxiter), cfg.R,
                                     cfg.vehicle)
    print(f"J0={result.initial_cost:.6g} J={result.cost:.6g} "
          f"improvement={100 * result.improvement:.1f}% evaluations={result.evaluations}")
    if args.out:
        write_q_file(result.Q, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_tune_k1(args) -> int:
    cfg = load_config(args.config)
    best, table = tune_driver_gain(cfg=cfg, seed=args.seed)
    for k1, rms, peak in table:
        print(f"k1={k1:.3f} rms={rms:.4f} max={peak:.4f}")
    print(f"selected k1={best:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srptsim", description=__doc__)
    ap.add_argument("--config", type=Path, help="section.key = value overrides")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="one closed-loop lap")
    run.add_argument("--mode", choices=MODES, default="srpt-ekf")
    run.add_argument("--noise-set", default="ii", choices=("i", "ii", "iii", "iv", "v", "vi"))
    run.add_argument("--delay", type=_on_off, default=True, metavar="{on,off}")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", type=Path, required=True)
    run.add_argument("--no-plots", action="store_true")
    run.add_argument("--latency", action="store_true", help="also dump per-message link delays")
    run.set_defaults(func=cmd_run)

    grid = sub.add_parser("grid", help="all 14 runs plus metrics and plots")
    grid.add_argument("--seed", type=int, default=0)
    grid.add_argument("--out", type=Path, required=True)
    grid.add_argument("--no-plots", action="store_true")
    grid.add_argument("--latency", action="store_true", help="also dump per-message link delays")
    grid.set_defaults(func=cmd_grid)

    tq = sub.add_parser("tune-q", help="fit the EKF process noise on a recorded lap")
    tq.add_argument("--log", type=Path, help="lap CSV; recorded on the fly when omitted")
    tq.add_argument("--save-log", type=Path, help="where to keep the recorded lap")
    tq.add_argument("--seed", type=int, default=0)
    tq.add_argument("--maxiter", type=int, default=TuningConfig().maxiter)
    tq.add_argument("--out", type=Path, help="write the tuned diagonal here")
    tq.set_defaults(func=cmd_tune_q)

    tk = sub.add_parser("tune-k1", help="sweep the look-ahead driver gain")
    tk.add_argument("--seed", type=int, default=0)
    tk.set_defaults(func=cmd_tune_k1)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
