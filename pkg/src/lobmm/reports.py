"""Plot-ready CSVs from the outputs of earlier runs.

``build_report`` scans a run directory for simulator statistics, value
tables and backtest reports, optionally adds queue histograms of event data,
and writes one CSV per figure plus an ``index.json`` listing them with their
hashes. Nothing is rendered.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np

from .eventio import Record, read_events
from .lob_core import Q_MAX, lots_of
from .mdp.store import StoreError, read_values
from .mdp.surfaces import to_csv, write_surfaces
from .simulator import STATS_HEADER

INDEX_NAME = "index.json"


def sha256_of(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --- queue histograms --------------------------------------------------------------------

def read_stats_hist(path: Union[str, Path]) -> np.ndarray:
    """Pooled (bid + ask, all seeds) 1 Hz histogram from a ``stats.csv``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != STATS_HEADER:
        raise ValueError(f"{path}: not a simulator stats file")
    q_max = max(int(r[1]) for r in rows[1:]) if len(rows) > 1 else 0
    h = np.zeros(q_max + 1, dtype=np.int64)
    for r in rows[1:]:
        h[int(r[1])] += int(r[2]) + int(r[3])
    return h


def data_hist(records: Iterable[Record], q_max: int = Q_MAX) -> np.ndarray:
    """Best-queue sizes (lots) of an event stream sampled once per second."""
    h = np.zeros(q_max + 1, dtype=np.int64)
    next_t = None
    qb = qa = None
    for r in records:
        t = r.ts_ns
        if next_t is None:
            next_t = t
        while next_t < t and qb is not None:
            h[qb] += 1
            h[qa] += 1
            next_t += 10**9
        qb, qa = lots_of(r.bb_qty, q_max), lots_of(r.ba_qty, q_max)
    if qb is not None:
        h[qb] += 1
        h[qa] += 1
    return h


def normalized(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    s = h.sum()
    return h / s if s > 0 else h


def percentile_bin(h: np.ndarray, level: float = 0.9) -> int:
    """Smallest bin whose cumulative frequency reaches ``level``."""
    return int(np.searchsorted(np.cumsum(normalized(h)), level - 1e-12))


def mass_above(h: np.ndarray, b: int) -> float:
    return float(normalized(h)[b + 1:].sum())


def histogram_rows(hists: Dict[str, np.ndarray]) -> List[list]:
    names = list(hists)
    width = max(len(h) for h in hists.values())
    cols = {n: np.pad(normalized(hists[n]), (0, width - len(hists[n]))) for n in names}
    return [[q] + [float(cols[n][q]) for n in names] for q in range(width)]


def tail_rows(hists: Dict[str, np.ndarray], reference: str) -> List[list]:
    """Mass of every histogram above the reference's 90th-percentile bin."""
    b = percentile_bin(hists[reference])
    return [[name, reference, b, mass_above(h, b)] for name, h in hists.items()]


# --- report ------------------------------------------------------------------------------

def _write(out_dir: Path, name: str, text: str, kind: str, source: str, entries: List[dict]) -> None:
    p = out_dir / name
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
    entries.append({"path": name, "kind": kind, "source": source})


def _curve_rows(rep: dict) -> List[list]:
    rows = []
    for label in sorted(rep.get("curves", {})):
        for t, pnl, day in rep["curves"][label]:
            rows.append([label, day, float(t), float(pnl)])
    return rows


def build_report(run_dir: Union[str, Path], out_dir: Union[str, Path],
                 data_paths: Sequence[Union[str, Path]] = (), q_max: int = Q_MAX) -> dict:
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"{run_dir}: run directory not found")
    out_dir.mkdir(parents=True, exist_ok=True)
    out_resolved = out_dir.resolve()
    entries: List[dict] = []
    files = sorted(p for p in run_dir.rglob("*")
                   if p.is_file() and out_resolved not in p.resolve().parents)

    hists: Dict[str, np.ndarray] = {}
    for p in files:
        rel = p.relative_to(run_dir).as_posix()
        if p.suffix == ".csv":
            with open(p, newline="") as fh:
                first = fh.readline().strip()
            if first == ",".join(STATS_HEADER):
                hists[rel] = read_stats_hist(p)
        elif p.suffix == ".bin":
            try:
                V, meta = read_values(p)
            except (StoreError, FileNotFoundError):
                continue
            stem = rel[: -len(".bin")].replace("/", "_")
            for s in write_surfaces(V, meta, out_dir / f"surfaces_{stem}"):
                entries.append({"path": s.relative_to(out_dir).as_posix(), "kind": "surface", "source": rel})
        elif p.suffix == ".json" and not p.name.endswith(".manifest.json"):
            try:
                rep = json.loads(p.read_text())
            except json.JSONDecodeError:
                continue
            if isinstance(rep, dict) and "aggregate" in rep and "curves" in rep:
                stem = rel[: -len(".json")].replace("/", "_")
                _write(out_dir, f"pnl_curves_{stem}.csv", to_csv(["strategy", "day", "t", "cum_pnl"],
                                                                 _curve_rows(rep)), "pnl_curve", rel, entries)
                agg = [[a["strategy"], a["days"], a["pnl_k"], a["turnover_m"], a["profitability_bp"]]
                       for a in rep["aggregate"]]
                _write(out_dir, f"strategies_{stem}.csv",
                       to_csv(["strategy", "days", "pnl_k", "turnover_m", "profitability_bp"], agg),
                       "strategy_table", rel, entries)
    for dp in data_paths:
        hists[f"data:{Path(dp).name}"] = data_hist(read_events(dp), q_max)
    if hists:
        names = list(hists)
        _write(out_dir, "queue_histograms.csv", to_csv(["q_bin"] + names, histogram_rows(hists)), "histogram",
               ";".join(names), entries)
        _write(out_dir, "queue_tails.csv", to_csv(["source", "reference", "p90_bin", "mass_above"],
                                                  tail_rows(hists, names[0])), "tail", names[0], entries)
    for e in entries:
        e["sha256"] = sha256_of(out_dir / e["path"])
    entries.sort(key=lambda e: e["path"])
    index = {"files": entries}
    (out_dir / INDEX_NAME).write_text(json.dumps(index, indent=1, sort_keys=True))
    return index
