"""Event-stream files: one comma-separated record per line with a header.

    ts_ns,kind,side,price_ticks,size_contracts,bb_qty,ba_qty

``bb_qty``/``ba_qty`` are the best queues right after the event. While a
limit is empty and awaiting an establishing order its quantity is 0.
"""

from __future__ import annotations

import csv
import glob
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, NamedTuple, Optional, Sequence, Union

from .lob_core import LOT_CONTRACTS, EstablishKind, RemovalKind, Side

HEADER = ["ts_ns", "kind", "side", "price_ticks", "size_contracts", "bb_qty", "ba_qty"]


class DataError(Exception):
    """Malformed or inconsistent input data."""


class Record(NamedTuple):
    ts_ns: int
    kind: str
    side: str
    price_ticks: int
    size_contracts: int
    bb_qty: int
    ba_qty: int

    @property
    def time(self) -> float:
        return self.ts_ns * 1e-9


def _parse_row(row: Sequence[str], lineno: int, source: str) -> Record:
    if len(row) != len(HEADER):
        raise DataError(f"{source}:{lineno}: expected {len(HEADER)} fields, got {len(row)}")
    try:
        rec = Record(int(row[0]), row[1].strip(), row[2].strip(), int(row[3]), int(row[4]),
                     int(row[5]), int(row[6]))
    except ValueError as exc:
        raise DataError(f"{source}:{lineno}: {exc}") from None
    if rec.kind not in ("L", "C", "M"):
        raise DataError(f"{source}:{lineno}: unknown kind {rec.kind!r}")
    if rec.side not in ("B", "A"):
        raise DataError(f"{source}:{lineno}: unknown side {rec.side!r}")
    if rec.ts_ns < 0 or rec.size_contracts < 1 or rec.bb_qty < 0 or rec.ba_qty < 0:
        raise DataError(f"{source}:{lineno}: negative time/quantity or zero size")
    return rec


def parse_lines(lines: Iterable[str], source: str = "<stream>") -> Iterator[Record]:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        return
    if [h.strip() for h in header] != HEADER:
        raise DataError(f"{source}:1: bad header {header!r}")
    last = -1
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        rec = _parse_row(row, lineno, source)
        if rec.ts_ns < last:
            raise DataError(f"{source}:{lineno}: timestamps out of order ({rec.ts_ns} < {last})")
        last = rec.ts_ns
        yield rec


def read_events(path: Union[str, Path]) -> List[Record]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path, newline="") as fh:
        return list(parse_lines(fh, str(path)))


def expand_inputs(pattern: str) -> List[Path]:
    paths = sorted(Path(p) for p in glob.glob(pattern))
    if not paths:
        raise FileNotFoundError(pattern)
    return paths


def format_records(records: Iterable[Record]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in records:
        w.writerow(r)
    return buf.getvalue()


def write_events(path: Union[str, Path], records: Iterable[Record]) -> None:
    Path(path).write_text(format_records(records))


@dataclass
class Establishment:
    """A matched removal/establishment pair found in a stream."""

    side: Side  # emptied side
    o_r: RemovalKind
    q_r: int  # contracts
    o_e: EstablishKind
    q_e: int  # contracts
    dt: float
    q_first: int  # surviving best queue just before the establishment (contracts)
    q_pre: int  # emptied limit's queue just before the removal (contracts)


@dataclass
class Step:
    """One record annotated with the book around it."""

    rec: Record
    pre_bid: int
    pre_ask: int
    bid_px: int
    ask_px: int
    at_best: bool
    emptied: Optional[Side] = None  # set when this record emptied a best limit
    establishment: Optional[Establishment] = None
    resynced: bool = False


@dataclass
class TrackerReport:
    records: int = 0
    resyncs: int = 0
    off_book: int = 0
    removals: int = 0
    establishments: int = 0
    unmatched: int = 0


class BookTracker:
    """Follows best prices and queues through a record stream.

    Prices are inferred from event levels: the first record sets the initial
    best bid; establishing limits at the emptied level decide follow/revert.
    Any disagreement with the snapshot quantities is resolved by trusting the
    snapshot, and counted when it reaches ``tolerance`` contracts (default: a
    lot, so lot-level streams written at bin midpoints do not trip it).
    """

    def __init__(self, tolerance: int = LOT_CONTRACTS):
        self.tolerance = tolerance
        self.bid_px: Optional[int] = None
        self.ask_px: Optional[int] = None
        self.q_bid = 0
        self.q_ask = 0
        self.emptied: Optional[Side] = None
        self._removal = None  # (kind, size, ts_ns, level, q_pre)
        self.report = TrackerReport()

    def _level(self, side: str) -> int:
        return self.bid_px if side == "B" else self.ask_px

    def step(self, rec: Record) -> Step:
        rep = self.report
        rep.records += 1
        if self.bid_px is None:
            self.bid_px = rec.price_ticks if rec.side == "B" else rec.price_ticks - 1
            self.ask_px = self.bid_px + 1
            self.q_bid, self.q_ask = rec.bb_qty, rec.ba_qty
            return Step(rec, rec.bb_qty, rec.ba_qty, self.bid_px, self.ask_px, False)

        pre_bid, pre_ask = self.q_bid, self.q_ask
        step = Step(rec, pre_bid, pre_ask, self.bid_px, self.ask_px, False)

        if self.emptied is not None:
            s = self.emptied
            empty_level = self._level(s.value)
            if rec.kind == "L" and rec.price_ticks == empty_level:
                kind, size, ts0, _, q_pre = self._removal
                if rec.side == s.value:
                    o_e = EstablishKind.REVERT
                    q_first = pre_ask if s is Side.BID else pre_bid
                else:
                    o_e = EstablishKind.FOLLOW
                    q_first = pre_ask if s is Side.BID else pre_bid
                    if s is Side.ASK:
                        self.bid_px, self.ask_px = empty_level, empty_level + 1
                    else:
                        self.ask_px, self.bid_px = empty_level, empty_level - 1
                dt = max((rec.ts_ns - ts0) * 1e-9, 1e-9)
                step.establishment = Establishment(s, kind, size, o_e, rec.size_contracts, dt,
                                                   q_first, q_pre)
                step.at_best = True
                rep.establishments += 1
                self.emptied = None
                self._removal = None
                self.q_bid, self.q_ask = rec.bb_qty, rec.ba_qty
                step.bid_px, step.ask_px = self.bid_px, self.ask_px
                return step
            if rec.side != s.value and rec.price_ticks == self._level(rec.side):
                step.at_best = True
                self._apply_plain(rec, step)
            else:
                rep.off_book += 1
                self.q_bid, self.q_ask = rec.bb_qty, rec.ba_qty
            return step

        if rec.price_ticks != self._level(rec.side):
            rep.off_book += 1
            self.q_bid, self.q_ask = rec.bb_qty, rec.ba_qty
            return step
        step.at_best = True
        self._apply_plain(rec, step)
        return step

    def _apply_plain(self, rec: Record, step: Step) -> None:
        q = self.q_bid if rec.side == "B" else self.q_ask
        if rec.kind == "L":
            expected = q + rec.size_contracts
        else:
            expected = q - rec.size_contracts
        observed = rec.bb_qty if rec.side == "B" else rec.ba_qty
        if abs(expected - observed) >= self.tolerance:
            step.resynced = True
            self.report.resyncs += 1
        other_obs = rec.ba_qty if rec.side == "B" else rec.bb_qty
        other_exp = self.q_ask if rec.side == "B" else self.q_bid
        if abs(other_obs - other_exp) >= self.tolerance:
            step.resynced = True
            self.report.resyncs += 1
        self.q_bid, self.q_ask = rec.bb_qty, rec.ba_qty
        if rec.kind != "L" and observed == 0 and self.emptied is None:
            side = Side(rec.side)
            if self._removal is not None:
                self.report.unmatched += 1
            self.emptied = side
            self._removal = (RemovalKind(rec.kind), rec.size_contracts, rec.ts_ns,
                             self._level(rec.side), q)
            step.emptied = side
            self.report.removals += 1

    def finish(self) -> TrackerReport:
        if self._removal is not None:
            self.report.unmatched += 1
            self._removal = None
        return self.report


def annotate(records: Iterable[Record]) -> Iterator[Step]:
    tracker = BookTracker()
    for rec in records:
        yield tracker.step(rec)
    tracker.finish()
