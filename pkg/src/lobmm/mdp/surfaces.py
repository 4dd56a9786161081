"""CSV grids of solved values and decisions (queue sizes and positions in lots)."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .store import _unpack_bits, pair_block


def own_index(x: int, y: int) -> int:
    return (x - 1) * x // 2 + (y - 1)


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


PAIR_HEADER = ["xb", "xa", "yb", "ya", "value", "decision"]
BUY_ONE_HEADER = ["x", "y", "q_ask", "value", "decision"]


def pair_over_queues(values: np.ndarray, keep: np.ndarray, Q: int, yb: int = 1, ya: int = 1) -> List[list]:
    """V and decision over ``(xb, xa)`` with positions fixed (states with x < y skipped)."""
    rows = []
    for xb in range(yb, Q + 1):
        for xa in range(ya, Q + 1):
            i, j = own_index(xb, yb), own_index(xa, ya)
            rows.append([xb, xa, yb, ya, float(values[i, j]), "wait" if keep[i, j] else "cancel"])
    return rows


def pair_over_positions(values: np.ndarray, keep: np.ndarray, xb: int, xa: int) -> List[list]:
    """V and decision over ``(yb, ya)`` with queues fixed."""
    rows = []
    for yb in range(1, xb + 1):
        for ya in range(1, xa + 1):
            i, j = own_index(xb, yb), own_index(xa, ya)
            rows.append([xb, xa, yb, ya, float(values[i, j]), "wait" if keep[i, j] else "cancel"])
    return rows


def buy_one_map(V: np.ndarray, meta: dict, q_ask: int) -> List[list]:
    """Keep-or-cancel map of a bid at the best over ``(x, y)`` for a fixed ask queue."""
    Q = meta["Q"]
    start, size = meta["groups"]["A"]
    dec = _unpack_bits(meta["decisions"], (meta["count"],))
    rows = []
    for x in range(1, Q + 1):
        for y in range(1, x + 1):
            i = start + own_index(x, y) * Q + q_ask - 1
            rows.append([x, y, q_ask, float(V[i]), "wait" if dec[i] else "cancel"])
    return rows


def surface_tables(V: np.ndarray, meta: dict) -> Dict[str, Tuple[List[str], List[list]]]:
    """The standard set of grids for a stored table."""
    Q = meta["Q"]
    out: Dict[str, Tuple[List[str], List[list]]] = {}
    if meta["problem"] == "buy-one":
        for q in sorted({max(1, Q // 2), Q}):
            out[f"buy_one_qa{q}"] = (BUY_ONE_HEADER, buy_one_map(V, meta, q))
        return out
    values, keep = pair_block(V, meta)
    out["pair_queues_y1_1"] = (PAIR_HEADER, pair_over_queues(values, keep, Q, 1, 1))
    mid = max(1, Q // 2)
    out[f"pair_queues_y{mid}_1"] = (PAIR_HEADER, pair_over_queues(values, keep, Q, mid, 1))
    out[f"pair_positions_x{Q}_{Q}"] = (PAIR_HEADER, pair_over_positions(values, keep, Q, Q))
    out[f"pair_positions_x{mid}_{Q}"] = (PAIR_HEADER, pair_over_positions(values, keep, mid, Q))
    return out


def write_surfaces(V: np.ndarray, meta: dict, out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, (header, rows) in surface_tables(V, meta).items():
        p = out_dir / f"{name}.csv"
        p.write_text(to_csv(header, rows))
        paths.append(p)
    return paths
