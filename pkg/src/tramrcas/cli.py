"""Command-line entry point: ``tramrcas <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 no fit.
Machine-readable results go to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .braking import (
    BrakingParams,
    BrakingSimulationError,
    NoFitError,
    braking_distance_naive,
    identify_params,
    simulate_braking_batch,
)
from .track_map import MapError, load_map
from .sim import ScenarioError, SimulationFailure, load_scenario, run_scenario

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_NO_FIT = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _read_json(path: Path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed {what} {path}: {exc}") from exc


def _load_params(path: Path | None) -> BrakingParams:
    if path is None:
        return BrakingParams()
    try:
        return BrakingParams.from_dict(_read_json(path, "params file"))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid params file {path}: {exc}") from exc


def cmd_run(args) -> int:
    try:
        cfg = load_scenario(args.scenario)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        simlog = run_scenario(cfg)
    except SimulationFailure as exc:
        if args.out is not None:
            exc.log.write(args.out)
        raise CliError(str(exc), EXIT_NUMERICAL) from exc
    except (ScenarioError, MapError) as exc:
        raise CliError(str(exc)) from exc
    if args.out is None:
        print(simlog.summary_json(), end="")
        return EXIT_OK
    for path in simlog.write(args.out):
        print(path)
    return EXIT_OK


def cmd_map_check(args) -> int:
    try:
        track_map = load_map(args.map)
    except (MapError, OSError) as exc:
        raise CliError(f"invalid map {args.map}: {exc}") from exc
    xmin, ymin, xmax, ymax = track_map.bbox()
    report = {
        "segments": len(track_map.segments),
        "switches": sorted(track_map.switches),
        "total_length_m": round(track_map.total_length, 3),
        "bbox_local_m": [round(xmin, 3), round(ymin, 3), round(xmax, 3), round(ymax, 3)],
    }
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_braking_curve(args) -> int:
    if not 0 <= args.v_min <= args.v_max:
        raise CliError(f"invalid speed range {args.v_min}..{args.v_max} km/h")
    params = _load_params(args.params)
    speeds_kmh = np.arange(args.v_min, args.v_max + 1e-9, 1.0)
    try:
        d_model = simulate_braking_batch(speeds_kmh / 3.6, params, args.theta, args.dt_int)
    except BrakingSimulationError as exc:
        raise CliError(str(exc), EXIT_NUMERICAL) from exc
    rows = [
        (f"{v:g}", f"{d:.6f}", f"{braking_distance_naive(v / 3.6):.6f}")
        for v, d in zip(speeds_kmh, d_model)
    ]
    out = sys.stdout if args.out is None else open(args.out, "w", newline="", encoding="utf-8")
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(("v_kmh", "d_model", "d_naive"))
        writer.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    if args.out is not None:
        print(args.out)
    return EXIT_OK


def read_braking_run(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """A braking run as ``(t, v)`` from a CSV file.

    Accepts plain ``t,v`` files or a tram log written by ``run``, in which
    case the rows from brake application onwards are used.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError(f"{path}: empty run log")
    cols = rows[0].keys()
    try:
        if "v" in cols:
            t = np.array([float(r["t"]) for r in rows])
            v = np.array([float(r["v"]) for r in rows])
        elif {"truth_v", "braking"} <= set(cols):
            braking = [r for r in rows if r["braking"] == "1"]
            if len(braking) < 2:
                raise CliError(f"{path}: tram log contains no braking phase")
            t = np.array([float(r["t"]) for r in braking])
            v = np.array([float(r["truth_v"]) for r in braking])
        else:
            raise CliError(f"{path}: expected columns t,v or a tram log")
    except ValueError as exc:
        raise CliError(f"{path}: non-numeric value: {exc}") from exc
    return t - t[0], v


def cmd_identify(args) -> int:
    logs = Path(args.logs)
    files = sorted(logs.glob("*.csv")) if logs.is_dir() else []
    if not files:
        raise CliError(f"no run logs (*.csv) in {logs}")
    runs = [read_braking_run(f) for f in files]
    fixed = _read_json(args.fixed, "fixed params") if args.fixed else {}
    bounds = _read_json(args.bounds, "bounds") if args.bounds else {}
    try:
        fixed_params = BrakingParams.from_dict(fixed)
        space = {k: (float(lo), float(hi)) for k, (lo, hi) in bounds.items()}
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid identification inputs: {exc}") from exc
    try:
        result = identify_params(runs, fixed_params, space, dt_int=args.dt_int, max_mse=args.max_mse)
    except NoFitError as exc:
        raise CliError(str(exc), EXIT_NO_FIT) from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    except BrakingSimulationError as exc:
        raise CliError(str(exc), EXIT_NUMERICAL) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params_path = out / "fitted_params.json"
    report_path = out / "fit_report.json"
    params_path.write_text(json.dumps(result.params.to_dict(), indent=2) + "\n", encoding="utf-8")
    report = {
        "mse": result.mse,
        "runs": [{"file": f.name, "mse": m} for f, m in zip(files, result.per_run_mse)],
        "free": sorted(space),
    }
    report_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(params_path)
    print(report_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tramrcas", description="Tram V2V collision avoidance simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run a scenario and write logs")
    run.add_argument("--scenario", type=Path, required=True)
    run.add_argument("--out", type=Path, help="output directory (summary to stdout if omitted)")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.set_defaults(func=cmd_run)

    mc = sub.add_parser("map-check", parents=[common], help="validate a track map and print its outline")
    mc.add_argument("--map", type=Path, required=True)
    mc.set_defaults(func=cmd_map_check)

    ident = sub.add_parser("identify", parents=[common], help="fit braking parameters to measured runs")
    ident.add_argument("--logs", type=Path, required=True, help="directory of braking run CSVs")
    ident.add_argument("--fixed", type=Path, help="JSON of known parameters")
    ident.add_argument("--bounds", type=Path, help="JSON mapping free parameter -> [lo, hi]")
    ident.add_argument("--out", type=Path, required=True)
    ident.add_argument("--dt-int", type=float, default=1e-3)
    ident.add_argument("--max-mse", type=float, default=0.05, help="reject fits above this MSE (m/s)^2")
    ident.set_defaults(func=cmd_identify)

    bc = sub.add_parser("braking-curve", parents=[common], help="model vs naive braking distance per km/h")
    bc.add_argument("--params", type=Path, help="BrakingParams JSON (identified defaults if omitted)")
    bc.add_argument("--v-min", type=float, default=0.0, help="km/h")
    bc.add_argument("--v-max", type=float, default=60.0, help="km/h")
    bc.add_argument("--theta", type=float, default=0.0, help="constant slope, rad")
    bc.add_argument("--dt-int", type=float, default=1e-3)
    bc.add_argument("--out", type=Path, help="CSV path (stdout if omitted)")
    bc.set_defaults(func=cmd_braking_curve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"tramrcas: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
