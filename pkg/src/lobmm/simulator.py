"""Event-driven Monte Carlo of the two best limits (Models 0, I and II).

Between events the rates only depend on the current queues, so each step is
a race of exponential clocks. When a limit empties, the establishing order is
the next transition, after a delay drawn from the regeneration law.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .calibration import CalibrationSet, IntensityTable
from .eventio import Record
from .lob_core import (
    BookState,
    EstablishEvent,
    EstablishKind,
    Event,
    OrderKind,
    Removal,
    RemovalKind,
    Side,
    apply_establishment,
    apply_event,
    contracts_of,
)
from .order_flow import (
    N_DT_CELLS,
    ConfigError,
    DiscreteLaw,
    RegenerationTable,
    _cdf_list,
    _invert,
    sample_dt_in_cell,
    sample_establishment,
)
from .rng import UniformStream, substream

VARIANTS = ("0", "I", "II")


class AbsorbingStateError(RuntimeError):
    pass


@dataclass
class SideOnlyRegen:
    """Establishment law of Models 0 and I: one follow probability and one
    delay histogram, independent of the removal."""

    p_follow: float
    dt_pmf: Tuple[float, ...]

    @classmethod
    def from_table(cls, table: RegenerationTable) -> "SideOnlyRegen":
        nf = n = 0.0
        for k, p in table.p_follow.items():
            c = float(table.counts.get(k, 1))
            nf += p * c
            n += c
        acc = np.zeros(N_DT_CELLS)
        for k, v in table.dt_law.items():
            acc += np.asarray(v) * float(table.counts.get(k, 1))
        if acc.sum() == 0:
            acc[int(round((-3.0 + 6.0) / 0.1))] = 1.0
        return cls(nf / n if n else 0.5, tuple((acc / acc.sum()).tolist()))


@dataclass
class ModelSpec:
    variant: str
    intensities: IntensityTable
    size_laws: Optional[Dict[str, Dict[int, object]]] = None
    regen: Optional[RegenerationTable] = None
    side_regen: Optional[SideOnlyRegen] = None
    hidden_law: Optional[DiscreteLaw] = None
    seed: int = 0
    q_max: int = 50

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant != "0" and not self.size_laws:
            raise ConfigError(f"Model {self.variant} needs size laws")
        if self.variant == "II" and (self.regen is None or self.regen.empty):
            raise ConfigError("Model II needs a regeneration table")
        if self.variant != "II" and self.side_regen is None:
            if self.regen is None:
                raise ConfigError(f"Model {self.variant} needs side-only follow probabilities")
            self.side_regen = SideOnlyRegen.from_table(self.regen)
        tab = self.intensities.filled()
        if tab.q_max < self.q_max:
            raise ConfigError(f"intensity table covers {tab.q_max} bins, need {self.q_max}")
        self.lam_L = np.nan_to_num(tab.lam["L"][: self.q_max + 1]).copy()
        self.lam_C = np.nan_to_num(tab.lam["C"][: self.q_max + 1]).copy()
        self.lam_M = np.nan_to_num(tab.lam["M"][: self.q_max + 1]).copy()
        for a in (self.lam_L, self.lam_C, self.lam_M):
            a[0] = 0.0
        # a full queue cannot grow
        self.lam_L[self.q_max] = 0.0
        top = self.q_max - 1
        if self.lam_L[top] >= self.lam_C[top] + self.lam_M[top]:
            warnings.warn("limit intensity dominates removals at the largest bins; the chain may not be ergodic")
        if self.hidden_law is None:
            self.hidden_law = DiscreteLaw(tuple(birth_death_stationary(self.lam_L, self.lam_C + self.lam_M)[1:].tolist()))

    @classmethod
    def from_calibration(cls, cal: CalibrationSet, variant: str, seed: int = 0,
                         q_max: Optional[int] = None, hidden_law: Optional[DiscreteLaw] = None) -> "ModelSpec":
        """The calibration's revealed-queue law is used unless one is given."""
        return cls(variant, cal.pooled_intensities(), cal.size_laws, cal.regen, None,
                   hidden_law or cal.hidden_law, seed, q_max or cal.q_max)

    def with_hidden_law(self, law: DiscreteLaw) -> "ModelSpec":
        return ModelSpec(self.variant, self.intensities, self.size_laws, self.regen, self.side_regen,
                         law, self.seed, self.q_max)

    def with_seed(self, seed: int) -> "ModelSpec":
        return ModelSpec(self.variant, self.intensities, self.size_laws, self.regen, self.side_regen,
                         self.hidden_law, seed, self.q_max)

    # size pmfs on 1..n used by the MDP kernel as well
    def limit_law(self, q: int):
        return self.size_laws["L"][max(q, 1)]

    def cancel_law(self, q: int):
        return self.size_laws["C"][q]

    def market_law(self, q: int):
        return self.size_laws["M"][q]


def birth_death_stationary(up: np.ndarray, down: np.ndarray) -> np.ndarray:
    """Stationary law on ``1..n`` of a unit-step chain with rates ``up[q]``
    (q -> q+1) and ``down[q]`` (q -> q-1); index 0 is returned as 0."""
    n = len(up) - 1
    logp = np.zeros(n + 1)
    logp[0] = -np.inf
    for q in range(1, n):
        if up[q] <= 0 or down[q + 1] <= 0:
            logp[q + 1:] = -np.inf
            break
        logp[q + 1] = logp[q] + math.log(up[q]) - math.log(down[q + 1])
    p = np.exp(logp - np.max(logp))
    return p / p.sum()


# --- engine ---------------------------------------------------------------------------------

# event tuples: (t, kind, side, size_lots, q_bid, q_ask, p_ref, extra)
# kind in "L", "C", "M" or "E" (establishment); extra is the EstablishEvent for "E".


class Engine:
    """Generates the jump chain of a spec from an initial book."""

    def __init__(self, spec: ModelSpec, rng, state: Optional[BookState] = None):
        self.spec = spec
        self.u = rng if isinstance(rng, UniformStream) else UniformStream(rng)
        if state is None:
            q0 = int(np.argmax(spec.hidden_law.pmf_values)) + 1
            state = BookState(q0, q0, 0, q_max=spec.q_max)
        self.state = state
        self.t = 0.0
        qm = spec.q_max
        self._lawcdf: Dict[Tuple[str, int], List[float]] = {}
        self._hidden_cdf = _cdf_list(spec.hidden_law.pmf_values)
        if spec.variant != "II":
            self._dt_cdf = _cdf_list(spec.side_regen.dt_pmf)
        self.L = spec.lam_L.tolist()
        self.C = spec.lam_C.tolist()
        self.M = spec.lam_M.tolist()
        self.qm = qm

    def _size(self, kind: str, q: int) -> int:
        """Size in lots of an order hitting/joining a queue holding ``q`` lots."""
        spec = self.spec
        if spec.variant == "0":
            return 1
        key = (kind, q)
        cdf = self._lawcdf.get(key)
        if cdf is None:
            if kind == "L":
                cap = self.qm - q
                pm = spec.limit_law(q).pmf_array(cap).copy()
                pm[-1] += max(0.0, 1.0 - pm.sum())
            elif kind == "C":
                pm = spec.cancel_law(q).pmf_array(q)
            else:
                pm = spec.market_law(q).pmf_array(q)
            cdf = _cdf_list(pm)
            self._lawcdf[key] = cdf
        return _invert(cdf, self.u()) + 1

    def _hidden(self) -> int:
        return min(_invert(self._hidden_cdf, self.u()) + 1, self.qm)

    def establishment(self) -> EstablishEvent:
        st = self.state
        spec = self.spec
        rem = st.last_removal
        if spec.variant == "II":
            return sample_establishment(spec.regen, rem.kind, rem.size, self.u, self.qm)
        o_e = EstablishKind.FOLLOW if self.u() < spec.side_regen.p_follow else EstablishKind.REVERT
        if spec.variant == "0":
            q_e = 1
        else:
            q_e = min(spec.limit_law(1).sample(self.u), self.qm)
        cell = _invert(self._dt_cdf, self.u())
        return EstablishEvent(o_e, q_e, sample_dt_in_cell(cell, self.u()))

    def events(self, horizon: float) -> Iterator[tuple]:
        """Yield events with time <= horizon; the engine state follows."""
        u = self.u
        L, C, M = self.L, self.C, self.M
        st = self.state
        qb, qa, p = st.q_bid, st.q_ask, st.p_ref
        t = self.t
        emptied = st.emptied
        last = st.last_removal
        while True:
            if emptied is not None:
                self.state = BookState(qb, qa, p, last, emptied, self.qm)
                est = self.establishment()
                t_next = t + est.dt
                if t_next > horizon:
                    break
                t = t_next
                h = self._hidden() if est.o_e is EstablishKind.FOLLOW else 0
                new = apply_establishment(self.state, est, h)
                side = emptied
                qb, qa, p = new.q_bid, new.q_ask, new.p_ref
                emptied = None
                yield (t, "E", side, est.q_e, qb, qa, p, est)
                continue
            lb, cb, mb = L[qb], C[qb], M[qb]
            la, ca, ma = L[qa], C[qa], M[qa]
            tot = lb + cb + mb + la + ca + ma
            if tot <= 0.0:
                raise AbsorbingStateError(f"all rates vanish at queues ({qb}, {qa})")
            t_next = t - math.log(1.0 - u()) / tot
            if t_next > horizon:
                break
            t = t_next
            x = u() * tot
            if x < lb + cb + mb:
                side, q = Side.BID, qb
                if x < lb:
                    kind = "L"
                elif x < lb + cb:
                    kind = "C"
                else:
                    kind = "M"
            else:
                side, q = Side.ASK, qa
                x -= lb + cb + mb
                if x < la:
                    kind = "L"
                elif x < la + ca:
                    kind = "C"
                else:
                    kind = "M"
            s = self._size(kind, q)
            if kind == "L":
                s = min(s, self.qm - q)
                nq = q + s
            else:
                s = min(s, q)
                nq = q - s
            if side is Side.BID:
                qb = nq
            else:
                qa = nq
            if nq == 0:
                emptied = side
                last = Removal(RemovalKind(kind), s)
            yield (t, kind, side, s, qb, qa, p, None)
        self.t = horizon if horizon > t else t
        self.state = BookState(qb, qa, p, last, emptied, self.qm)


def step(state: BookState, spec: ModelSpec, rng) -> Tuple[float, Event, BookState]:
    """One competing-exponential transition from a book with both queues alive."""
    if state.awaiting:
        raise ConfigError("book is awaiting an establishment; use step_establishment")
    eng = Engine(spec, rng, state)
    ev = next(eng.events(math.inf))
    t, kind, side, s = ev[0], ev[1], ev[2], ev[3]
    e = Event(t, OrderKind(kind), side, s)
    return t, e, apply_event(state, e)


def step_establishment(state: BookState, spec: ModelSpec, rng) -> Tuple[float, EstablishEvent, BookState]:
    if not state.awaiting or state.last_removal is None:
        raise ConfigError("no establishment pending")
    eng = Engine(spec, rng, state)
    ev = next(eng.events(math.inf))
    est = ev[7]
    return est.dt, est, BookState(ev[4], ev[5], ev[6], state.last_removal, None, state.q_max)


# --- runs and statistics --------------------------------------------------------------------

@dataclass
class SimStats:
    q_max: int
    hist_bid: np.ndarray
    hist_ask: np.ndarray
    price_changes: int = 0
    events: Dict[str, int] = field(default_factory=dict)
    establishments: Dict[str, int] = field(default_factory=dict)
    occupation: Optional[np.ndarray] = None  # seconds per bin, both sides pooled
    counts: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def events_total(self) -> int:
        return int(sum(self.events.values()))

    def pooled_hist(self) -> np.ndarray:
        return self.hist_bid + self.hist_ask

    def merge(self, other: "SimStats") -> "SimStats":
        ev = {k: self.events.get(k, 0) + other.events.get(k, 0) for k in set(self.events) | set(other.events)}
        es = {k: self.establishments.get(k, 0) + other.establishments.get(k, 0)
              for k in set(self.establishments) | set(other.establishments)}
        return SimStats(self.q_max, self.hist_bid + other.hist_bid, self.hist_ask + other.hist_ask,
                        self.price_changes + other.price_changes, ev, es,
                        self.occupation + other.occupation,
                        {k: self.counts[k] + other.counts[k] for k in self.counts})


@dataclass
class SimResult:
    stats: SimStats
    path: Optional[List[tuple]]
    initial: BookState
    final: BookState


def run(spec: ModelSpec, horizon_s: float, record: bool = False, state: Optional[BookState] = None,
        purpose: str = "simulate") -> SimResult:
    """Simulate to ``horizon_s`` seconds sampling the best queues at 1 Hz."""
    if horizon_s < 0:
        raise ValueError("horizon must be >= 0")
    eng = Engine(spec, substream(spec.seed, purpose), state)
    init = eng.state
    qm = spec.q_max
    hb = np.zeros(qm + 1, dtype=np.int64)
    ha = np.zeros(qm + 1, dtype=np.int64)
    occ = np.zeros(qm + 1)
    counts = {k: np.zeros(qm + 1, dtype=np.int64) for k in "LCM"}
    ev_counts = {"L": 0, "C": 0, "M": 0, "E": 0}
    est_counts = {"F": 0, "R": 0}
    path = [] if record else None
    qb, qa = init.q_bid, init.q_ask
    if init.awaiting:
        if init.emptied is Side.BID:
            qb = 0
        else:
            qa = 0
    t_prev = 0.0
    next_sample = 0.0
    price_changes = 0
    for ev in eng.events(horizon_s):
        t = ev[0]
        while next_sample < t:
            hb[qb] += 1
            ha[qa] += 1
            next_sample += 1.0
        dt = t - t_prev
        occ[qb] += dt
        occ[qa] += dt
        kind = ev[1]
        ev_counts[kind] += 1
        if kind == "E":
            est = ev[7]
            est_counts[est.o_e.value] += 1
            if est.o_e is EstablishKind.FOLLOW:
                price_changes += 1
        else:
            counts[kind][qb if ev[2] is Side.BID else qa] += 1
        qb, qa = ev[4], ev[5]
        t_prev = t
        if record:
            path.append(ev)
    while next_sample <= horizon_s and horizon_s > 0:
        hb[qb] += 1
        ha[qa] += 1
        next_sample += 1.0
    if horizon_s > t_prev:
        occ[qb] += horizon_s - t_prev
        occ[qa] += horizon_s - t_prev
    occ[0] = 0.0
    stats = SimStats(qm, hb, ha, price_changes, ev_counts, est_counts, occ, counts)
    return SimResult(stats, path, init, eng.state)


def replay_path(initial: BookState, path: Sequence[tuple]) -> List[BookState]:
    """Re-apply a recorded path through the book rules (consistency check)."""
    st = initial
    out = []
    for ev in path:
        if ev[1] == "E":
            est = ev[7]
            hidden = (ev[5] if st.emptied is Side.ASK else ev[4]) if est.o_e is EstablishKind.FOLLOW else 0
            st = apply_establishment(st, est, hidden)
        else:
            st = apply_event(st, Event(ev[0], OrderKind(ev[1]), ev[2], ev[3]))
        if (st.q_bid, st.q_ask, st.p_ref) != (ev[4], ev[5], ev[6]):
            raise AssertionError(f"path inconsistent at t={ev[0]}")
        out.append(st)
    return out


def prerun_hidden_law(spec: ModelSpec, horizon_s: float = 20000.0) -> DiscreteLaw:
    """Stationary best-queue law estimated from one pre-run of the spec."""
    res = run(spec, horizon_s, purpose="hidden-prerun")
    h = res.stats.pooled_hist()[1:].astype(float)
    h += 1e-12
    return DiscreteLaw(tuple((h / h.sum()).tolist()))


def _record(ev: tuple, t0_ns: int, price_offset: int = 0) -> Record:
    t, kind, side, s, qb, qa, p = ev[:7]
    p += price_offset
    ts = t0_ns + int(round(t * 1e9))
    bb, ba = contracts_of(qb), contracts_of(qa)
    if kind == "E":
        est_side = side if ev[7].o_e is EstablishKind.REVERT else side.other
        # after a follow the establishing order sits on the level that was emptied
        px = p if est_side is Side.BID else p + 1
        return Record(ts, "L", est_side.value, px, contracts_of(s), bb, ba)
    px = p if side is Side.BID else p + 1
    return Record(ts, kind, side.value, px, contracts_of(s), bb, ba)


def to_records(path: Sequence[tuple], t0_ns: int = 0, price_offset: int = 0) -> List[Record]:
    """Event-stream records for a simulated path.

    Queues are written at bin midpoints (``10q - 5`` contracts) and sizes
    likewise, so every quantity lands in the right lot bin when read back.
    Model prices start at 0; ``price_offset`` shifts them to a quoting level.
    """
    return [_record(ev, t0_ns, price_offset) for ev in path]


def stream_records(spec: ModelSpec, horizon_s: float, state: Optional[BookState] = None,
                   purpose: str = "simulate", t0_ns: int = 0) -> Iterator[Record]:
    """Lazily simulate and yield records."""
    eng = Engine(spec, substream(spec.seed, purpose), state)
    for ev in eng.events(horizon_s):
        yield _record(ev, t0_ns)


def stats_rows(seed: int, st: SimStats) -> List[list]:
    rows = []
    for q in range(st.q_max + 1):
        rows.append([seed, q, int(st.hist_bid[q]), int(st.hist_ask[q]), st.price_changes, st.events_total])
    return rows


STATS_HEADER = ["seed", "q_bin", "freq_bid", "freq_ask", "price_changes", "events_total"]


def format_stats(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_HEADER)
    w.writerows(rows)
    return buf.getvalue()
