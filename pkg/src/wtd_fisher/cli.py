"""Command-line front end.

    wtd-fisher --config model.yaml wtd --theta 1.0 --out wtd.csv
    wtd-fisher --config model.yaml fisher --theta-grid 0:3:41 --mask alice --out sweep.csv
    wtd-fisher --config model.yaml simulate --theta 1.5 -T 1e4 --runs 200 --seed 7 --out-dir runs/
    wtd-fisher --config model.yaml estimate --build-gains -T 1e4 --records runs/records --out est.csv

Exit codes: 0 success, 2 configuration or input error, 3 computation error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import io as wio
from ._parallel import resolve_jobs
from .errors import ComputationError, ModelError
from .estimator import build_gains, crb_campaign, estimate, in_validity_range
from .fisher import ObserverMask, default_grid, sweep
from .lindblad import TauGrid, auto_grid, waiting_time_distributions
from .model import ParameterizedModel, load_model
from .trajectory import DetectionRecord, batch_records, sort_intervals

log = logging.getLogger("wtd_fisher")

EXIT_INPUT = 2
EXIT_COMPUTE = 3


def _tool_version() -> str:
    for dist in ("wtd-fisher", "artifact"):
        try:
            return version(dist)
        except PackageNotFoundError:
            continue
    return "unknown"


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (np.isfinite(value) and value > 0):
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def parse_theta_grid(text: str) -> np.ndarray:
    """``start:stop:n`` -> ``n`` evenly spaced values including both ends."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ModelError(f"expected start:stop:n, got {text!r}", "--theta-grid")
    try:
        start, stop, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ModelError(f"expected start:stop:n, got {text!r}", "--theta-grid") from None
    if n < 1:
        raise ModelError(f"n must be at least 1, got {n}", "--theta-grid")
    return np.array([start]) if n == 1 else np.linspace(start, stop, n)


def _global_args(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="model config (YAML or JSON)")
    parser.add_argument("--out", default=default, help="output file")
    parser.add_argument("--jobs", type=_positive_int, default=default,
                        help="worker processes (default $WTD_FISHER_JOBS or CPU count)")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0,
                        help="random seed (default 0)")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wtd-fisher", description=__doc__.split("\n")[0])
    _global_args(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_args(common, suppress=True)

    w = sub.add_parser("wtd", parents=[common], help="waiting-time distributions to CSV")
    w.add_argument("--theta", type=float, help="parameter value (default: theta0 of the config)")
    w.add_argument("--tau-max", type=_positive_float, help="grid length (default: automatic)")
    w.add_argument("--bins", type=_positive_int, help="number of bins")

    f = sub.add_parser("fisher", parents=[common], help="Fisher information sweep to CSV")
    f.add_argument("--theta-grid", help="start:stop:n (default: theta0 only)")
    f.add_argument("--mask", default="all", help="all | alice | bob | custom:i,j,...")
    f.add_argument("--tau-max", type=_positive_float)
    f.add_argument("--bins", type=_positive_int)

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo detection records")
    s.add_argument("--theta", type=float, help="true parameter value (default: theta0)")
    s.add_argument("-T", "--duration", type=_positive_float, required=True, help="record duration")
    s.add_argument("--runs", type=_positive_int, default=1)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--mask", default="all")
    s.add_argument("--tau-max", type=_positive_float, help="histogram grid length (default: automatic)")
    s.add_argument("--bins", type=_positive_int)
    s.add_argument("--dt", type=_positive_float, help="simulation time step (default: automatic)")

    e = sub.add_parser("estimate", parents=[common], help="apply the linear estimator to records")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--gains", help="gain table CSV written by an earlier --build-gains run")
    src.add_argument("--build-gains", action="store_true", help="build gains at theta0 of the config")
    e.add_argument("--records", required=True, help="directory of record (or histogram) files")
    e.add_argument("-T", "--duration", type=_positive_float, help="probing time for --build-gains "
                   "(default: duration of the first record)")
    e.add_argument("--mask", default="all")
    e.add_argument("--tau-max", type=_positive_float)
    e.add_argument("--bins", type=_positive_int)
    e.add_argument("--save-gains", help="also write the built gain table here")
    e.add_argument("--theta-true", type=float, help="true parameter, for the summary bias row")

    c = sub.add_parser("campaign", parents=[common], help="Monte Carlo Cramer-Rao check over probing times")
    c.add_argument("-T", "--durations", required=True, help="comma-separated probing times")
    c.add_argument("--runs", type=_positive_int, default=200)
    c.add_argument("--mask", default="all")
    c.add_argument("--tau-max", type=_positive_float)
    c.add_argument("--bins", type=_positive_int)
    return p


def _load(args) -> tuple[ParameterizedModel, str]:
    if not args.config:
        raise ModelError("--config is required", "--config")
    path = Path(args.config)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ModelError(f"cannot read config: {exc.strerror}", str(path)) from None
    return load_model(text), str(path)


def _recentered(pm: ParameterizedModel, theta) -> ParameterizedModel:
    if theta is None:
        return pm
    if getattr(pm.builder, "path", ()) is None:
        raise ModelError("--theta needs a 'sweep' section naming the parameter", "sweep")
    return pm.recentered(theta)


def _grid(args, pm: ParameterizedModel, mask=None) -> TauGrid | None:
    if args.tau_max is not None:
        return TauGrid(args.tau_max, args.bins or 2000)
    return default_grid(pm, pm.theta0, mask, args.bins) if args.bins else None


def _require_out(args) -> Path:
    if not args.out:
        raise ModelError("--out is required", "--out")
    return Path(args.out)


def _manifest(args, cfg_path, pm, outputs, started, wall) -> dict:
    params = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    return {"subcommand": args.command, "config": cfg_path, "parameter": pm.parameter, "theta0": pm.theta0,
            "fd_step": pm.fd_step, "arguments": params, "seed": args.seed,
            "outputs": [str(o) for o in outputs], "version": _tool_version(),
            "started_at": started, "wall_clock_seconds": round(wall, 3)}


def _manifest_path_for(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def cmd_wtd(args, pm: ParameterizedModel):
    pm = _recentered(pm, args.theta)
    model = pm.at()
    grid = TauGrid(args.tau_max, args.bins or 2000) if args.tau_max else auto_grid(model, n_bins=args.bins)
    table = waiting_time_distributions(model, grid)
    out = _require_out(args)
    wio.write_wtd(out, table, {"theta": pm.theta0, "parameter": pm.parameter})
    log.info("normalization per channel: %s", table.normalization())
    return [out, wio.sidecar_path(out)], _manifest_path_for(out)


def cmd_fisher(args, pm: ParameterizedModel):
    model = pm.at()
    mask = ObserverMask.parse(args.mask, model.n_channels)
    thetas = parse_theta_grid(args.theta_grid) if args.theta_grid else np.array([pm.theta0])
    grid = TauGrid(args.tau_max, args.bins or 2000) if args.tau_max else None
    out = _require_out(args)
    rows = sweep(pm, thetas, grid, mask, jobs=resolve_jobs(args.jobs), n_bins=args.bins)
    wio.write_sweep(out, rows, model.n_channels)
    gaps = sum(not r.ok for r in rows)
    if gaps:
        log.warning("%d of %d sweep points failed; see the diagnostic column", gaps, len(rows))
    return [out], _manifest_path_for(out)


def cmd_simulate(args, pm: ParameterizedModel):
    pm = _recentered(pm, args.theta)
    model = pm.at()
    mask = ObserverMask.parse(args.mask, model.n_channels)
    grid = _grid(args, pm, mask) or default_grid(pm, pm.theta0, mask)
    records = batch_records(pm, pm.theta0, args.duration, args.runs, args.seed, resolve_jobs(args.jobs),
                            args.dt, mask)
    hists = [sort_intervals(r, grid) for r in records]
    out_dir = Path(args.out_dir)
    outputs = []
    for i, (rec, hist) in enumerate(zip(records, hists)):
        outputs.append(wio.write_record(out_dir / "records" / f"record_{i:04d}.csv", rec))
        outputs.append(wio.write_histogram(out_dir / "histograms" / f"hist_{i:04d}.csv", hist))
    outputs.append(wio.write_runs(out_dir / "runs.csv", records, hists))
    return outputs, out_dir / "manifest.json"


def _collect_inputs(records_dir: Path):
    if not records_dir.is_dir():
        raise ModelError("not a directory", str(records_dir))
    files = sorted(p for p in records_dir.iterdir() if p.suffix == ".csv")
    if not files:
        raise ModelError("no record files found", str(records_dir))
    return files


def cmd_estimate(args, pm: ParameterizedModel):
    files = _collect_inputs(Path(args.records))
    out = _require_out(args)
    runs_table = None
    records_or_hists = []
    for path in files:
        if wio.is_record_file(path):
            records_or_hists.append((path.stem, wio.read_record(path)))
        else:
            if runs_table is None:
                runs_file = path.parent.parent / "runs.csv"
                if not runs_file.exists():
                    raise ModelError("histogram input needs the run table runs.csv next to its directory",
                                     str(path))
                runs_table = {r["run"]: r for r in wio.read_runs(runs_file)}
            run = runs_table[int(path.stem.split("_")[-1])]
            records_or_hists.append((path.stem, wio.read_histogram(path, run["totals"], run["overflow"],
                                                                   run["T"])))
    outputs = [out]
    if args.gains:
        gains = wio.read_gains(args.gains)
    else:
        mask = ObserverMask.parse(args.mask, pm.at().n_channels)
        T = args.duration or records_or_hists[0][1].duration
        gains = build_gains(pm, _grid(args, pm, mask), T, mask)
        if args.save_gains:
            outputs += [wio.write_gains(args.save_gains, gains), wio.sidecar_path(args.save_gains)]
    names, values, valid = [], [], []
    for name, item in records_or_hists:
        hist = sort_intervals(item, gains.grid) if isinstance(item, DetectionRecord) else item
        value = estimate(gains, hist)
        names.append(name)
        values.append(value)
        valid.append(in_validity_range(gains, value))
    est = np.array(values)
    summary = {"n": est.size, "mean": est.mean(),
               "variance": est.var(ddof=1) if est.size > 1 else float("nan"),
               "standard_error": est.std(ddof=1) / np.sqrt(est.size) if est.size > 1 else float("nan"),
               "crb": gains.crb_variance, "theta0": gains.theta0, "delta_max": gains.delta_max}
    summary["ratio"] = summary["variance"] / summary["crb"]
    if args.theta_true is not None:
        summary["bias"] = summary["mean"] - (args.theta_true - gains.theta0)
    wio.write_estimates(out, names, values, valid, summary)
    return outputs, _manifest_path_for(out)


def cmd_campaign(args, pm: ParameterizedModel):
    try:
        T_list = [float(x) for x in args.durations.split(",") if x.strip()]
    except ValueError:
        raise ModelError(f"bad probing-time list {args.durations!r}", "-T") from None
    if not T_list or any(not (np.isfinite(t) and t > 0) for t in T_list):
        raise ModelError("probing times must be positive", "-T")
    mask = ObserverMask.parse(args.mask, pm.at().n_channels)
    out = _require_out(args)
    result = crb_campaign(pm, _grid(args, pm, mask), mask, T_list, args.runs, args.seed, resolve_jobs(args.jobs))
    wio.write_campaign(out, result.rows)
    log.info("log-log slope of variance against T: %.3f", result.slope)
    return [out], _manifest_path_for(out)


COMMANDS = {"wtd": cmd_wtd, "fisher": cmd_fisher, "simulate": cmd_simulate, "estimate": cmd_estimate,
            "campaign": cmd_campaign}


def _join_grid_values(argv):
    # "--theta-grid -1:1:5" would otherwise be read as an option
    out = list(argv)
    for i in range(len(out) - 1):
        if out[i] == "--theta-grid":
            out[i:i + 2] = [f"--theta-grid={out[i + 1]}"]
            break
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _join_grid_values(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:        # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        pm, cfg_path = _load(args)
        outputs, manifest_path = COMMANDS[args.command](args, pm)
        wio.write_manifest(manifest_path, _manifest(args, cfg_path, pm, outputs, started,
                                                    time.perf_counter() - t0))
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ComputationError as exc:
        hint = " (pass a smaller --dt)" if type(exc).__name__ == "StepSizeError" else ""
        print(f"computation failed: {type(exc).__name__}: {exc}{hint}", file=sys.stderr)
        return EXIT_COMPUTE
    return 0


if __name__ == "__main__":
    sys.exit(main())
