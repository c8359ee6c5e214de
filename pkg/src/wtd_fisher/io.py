"""CSV/JSON persistence. Every writer is atomic (temp file then rename) and has a matching reader."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ModelError
from .estimator import CampaignRow, GainTables
from .fisher import SweepRow
from .lindblad import TauGrid, WtdTable
from .trajectory import DetectionRecord, IntervalHistogram


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if np.isnan(x) else repr(x)


def _float(s: str) -> float:
    return float(s) if s != "" else float("nan")


def _read_rows(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _grid_meta(grid: TauGrid) -> dict:
    return {"tau_max": grid.tau_max, "n_bins": grid.n_bins}


# ---------------------------------------------------------------- waiting-time tables

def write_wtd(path, table: WtdTable, extra: dict | None = None) -> Path:
    M, _, n = table.values.shape
    tau = table.grid.centers
    rows = ((_fmt(tau[i]), m, mp, _fmt(table.values[m, mp, i]))
            for m in range(M) for mp in range(M) for i in range(n))
    meta = {**_grid_meta(table.grid), "channel_rates": table.channel_rates.tolist(),
            "survival_tail": table.survival_tail.tolist(),
            "efficiencies": None if table.efficiencies is None else table.efficiencies.tolist(),
            "normalization": table.normalization().tolist(), **(extra or {})}
    atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2) + "\n")
    return atomic_write_text(path, _csv_text(["tau", "m", "mprime", "w"], rows))


def read_wtd(path) -> WtdTable:
    meta = json.loads(sidecar_path(path).read_text())
    grid = TauGrid(meta["tau_max"], meta["n_bins"])
    M = len(meta["channel_rates"])
    values = np.zeros((M, M, grid.n_bins))
    for k, r in enumerate(_read_rows(path)):
        values[int(r["m"]), int(r["mprime"]), k % grid.n_bins] = float(r["w"])
    eff = meta.get("efficiencies")
    return WtdTable(grid, values, np.array(meta["channel_rates"]), np.array(meta["survival_tail"]),
                    None, None if eff is None else np.array(eff))


# ---------------------------------------------------------------- records and histograms

def write_record(path, record: DetectionRecord) -> Path:
    head = (f"# seed: {record.seed}\n# T: {record.duration!r}\n"
            f"# model_fingerprint: {record.model_fingerprint}\n# n_channels: {record.n_channels}\n")
    rows = ((_fmt(t), int(c)) for t, c in zip(record.times, record.channels))
    return atomic_write_text(path, head + _csv_text(["t", "channel"], rows))


def is_record_file(path) -> bool:
    with open(path) as fh:
        return fh.readline().startswith("# seed:")


def read_record(path) -> DetectionRecord:
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
    try:
        seed, T = int(meta["seed"]), float(meta["T"])
        fingerprint, M = meta["model_fingerprint"], int(meta["n_channels"])
    except (KeyError, ValueError) as exc:
        raise ModelError(f"bad record header ({exc})", str(path)) from None
    rows = _read_rows(path)
    times = np.array([float(r["t"]) for r in rows])
    channels = np.array([int(r["channel"]) for r in rows], dtype=np.int64)
    return DetectionRecord(times, channels, T, seed, fingerprint, M)


def write_histogram(path, hist: IntervalHistogram) -> Path:
    M = hist.counts.shape[0]
    centers = hist.grid.centers
    rows = ((m, mp, _fmt(centers[i]), int(hist.counts[m, mp, i]))
            for m in range(M) for mp in range(M) for i in range(hist.grid.n_bins))
    return atomic_write_text(path, _csv_text(["m", "mprime", "bin_center", "count"], rows))


def read_histogram(path, totals, overflow, duration: float = float("nan")) -> IntervalHistogram:
    """Inverse of :func:`write_histogram`; totals and overflow come from the run table."""
    rows = _read_rows(path)
    M = int(max(int(r["m"]) for r in rows)) + 1
    n = len(rows) // (M * M)
    counts = np.array([int(r["count"]) for r in rows], dtype=np.int64).reshape(M, M, n)
    dtau = 2 * float(rows[0]["bin_center"])
    grid = TauGrid(dtau * n, n)
    return IntervalHistogram(grid, counts, np.asarray(overflow, dtype=np.int64).reshape(M, M),
                             np.asarray(totals, dtype=np.int64), duration)


def _run_header(M: int) -> list[str]:
    return (["run", "seed", "T", "n_events"] + [f"N_{m}" for m in range(M)]
            + [f"overflow_{m}{mp}" for m in range(M) for mp in range(M)])


def write_runs(path, records: Sequence[DetectionRecord], hists: Sequence[IntervalHistogram]) -> Path:
    M = records[0].n_channels if records else 0
    rows = ([i, r.seed, _fmt(r.duration), len(r)] + h.totals.tolist() + h.overflow.ravel().tolist()
            for i, (r, h) in enumerate(zip(records, hists)))
    return atomic_write_text(path, _csv_text(_run_header(M), rows))


def read_runs(path) -> list[dict]:
    out = []
    for r in _read_rows(path):
        M = sum(1 for k in r if k.startswith("N_"))
        out.append({"run": int(r["run"]), "seed": int(r["seed"]), "T": float(r["T"]),
                    "totals": np.array([int(r[f"N_{m}"]) for m in range(M)]),
                    "overflow": np.array([int(r[f"overflow_{m}{mp}"]) for m in range(M) for mp in range(M)])})
    return out


# ---------------------------------------------------------------- Fisher sweeps

def sweep_header(n_channels: int) -> list[str]:
    return (["theta", "f_poisson", "f_count", "f_total", "crb", "tc_sensitivity"]
            + [f"rate_{m}" for m in range(n_channels)] + ["f_renewal", "diagnostic"])


def write_sweep(path, rows: Sequence[SweepRow], n_channels: int) -> Path:
    def line(row: SweepRow):
        rep = row.report
        if rep is None:
            return [_fmt(row.theta)] + [""] * (5 + n_channels + 1) + [row.diagnostic]
        return ([_fmt(row.theta), _fmt(rep.f_poisson_per_time), _fmt(rep.f_count_per_time),
                 _fmt(rep.f_total_per_time), _fmt(rep.crb_variance_time_product), _fmt(row.tc_sensitivity)]
                + [_fmt(c.rate) for c in rep.per_channel] + [_fmt(rep.f_renewal_per_time), row.diagnostic])
    return atomic_write_text(path, _csv_text(sweep_header(n_channels), (line(r) for r in rows)))


def read_sweep(path) -> list[dict]:
    out = []
    for r in _read_rows(path):
        out.append({k: (v if k == "diagnostic" else _float(v)) for k, v in r.items()})
    return out


# ---------------------------------------------------------------- gains

def write_gains(path, gains: GainTables) -> Path:
    M = gains.n_channels
    centers = gains.grid.centers
    rows = [("g", _fmt(centers[i]), m, mp, _fmt(gains.g[m, mp, i]))
            for m in range(M) for mp in range(M) for i in range(gains.grid.n_bins)]
    rows += [("offset", "", m, mp, _fmt(gains.offsets[m, mp])) for m in range(M) for mp in range(M)]
    rows += [("count_gain", "", m, "", _fmt(gains.count_gains[m])) for m in range(M)]
    rows += [("count_offset", "", m, "", _fmt(gains.count_offsets[m])) for m in range(M)]
    meta = {**_grid_meta(gains.grid), "n_channels": M, "T": gains.T, "theta0": gains.theta0,
            "fisher_total_per_time": gains.fisher_total_per_time,
            "delta_max": gains.delta_max if np.isfinite(gains.delta_max) else None}
    atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2) + "\n")
    return atomic_write_text(path, _csv_text(["kind", "tau", "m", "mprime", "value"], rows))


def read_gains(path) -> GainTables:
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except FileNotFoundError:
        raise ModelError("gain table sidecar missing", str(sidecar_path(path))) from None
    grid = TauGrid(meta["tau_max"], meta["n_bins"])
    M = meta["n_channels"]
    g = np.zeros((M, M, grid.n_bins))
    offsets = np.zeros((M, M))
    cg = np.zeros(M)
    co = np.zeros(M)
    k = 0
    for r in _read_rows(path):
        m, v = int(r["m"]), float(r["value"])
        if r["kind"] == "g":
            g[m, int(r["mprime"]), k % grid.n_bins] = v
            k += 1
        elif r["kind"] == "offset":
            offsets[m, int(r["mprime"])] = v
        elif r["kind"] == "count_gain":
            cg[m] = v
        elif r["kind"] == "count_offset":
            co[m] = v
        else:
            raise ModelError(f"unknown row kind {r['kind']!r}", str(path))
    dmax = meta.get("delta_max")
    return GainTables(grid, g, offsets, cg, co, meta["fisher_total_per_time"], meta["T"], meta["theta0"],
                      float("inf") if dmax is None else dmax)


# ---------------------------------------------------------------- estimator outputs

def write_estimates(path, names: Sequence[str], estimates: Sequence[float], valid: Sequence[bool],
                    summary: dict) -> Path:
    rows = [(n, _fmt(e), _fmt(bool(v))) for n, e, v in zip(names, estimates, valid)]
    rows += [(f"summary:{k}", _fmt(v), "") for k, v in summary.items()]
    return atomic_write_text(path, _csv_text(["record", "estimate", "in_validity_range"], rows))


def read_estimates(path) -> tuple[list[dict], dict]:
    rows, summary = [], {}
    for r in _read_rows(path):
        if r["record"].startswith("summary:"):
            summary[r["record"][len("summary:"):]] = _float(r["estimate"])
        else:
            rows.append({"record": r["record"], "estimate": _float(r["estimate"]),
                         "in_validity_range": r["in_validity_range"] == "1"})
    return rows, summary


def write_campaign(path, rows: Sequence[CampaignRow]) -> Path:
    lines = ((_fmt(r.T), r.n_runs, _fmt(r.var_emp), _fmt(r.var_crb), _fmt(r.ratio)) for r in rows)
    return atomic_write_text(path, _csv_text(["T", "n_runs", "var_emp", "var_crb", "ratio"], lines))


def read_campaign(path) -> list[dict]:
    return [{k: (int(v) if k == "n_runs" else _float(v)) for k, v in r.items()} for r in _read_rows(path)]


def write_manifest(path, manifest: dict) -> Path:
    return atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
