"""Estimation of intensities, size laws and regeneration tables from event
streams, plus the empirical diagnostics used to justify the model."""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .eventio import BookTracker, Establishment, Record, Step, read_events
from .lob_core import Q_MAX, bin_of, lots_of
from .order_flow import (
    N_DT_CELLS,
    DiscreteLaw,
    GeometricLaw,
    MarketSizeMixture,
    RegenerationTable,
    TruncatedGeometricLaw,
    atom_positions,
    dt_cell,
    law_from_dict,
    qr_bucket,
)

log = logging.getLogger(__name__)

SCHEMA = "model.v1"
KINDS = ("L", "C", "M")
SIDES = ("B", "A")
DEFAULT_MIN_COUNT = 200
GAP_NS = 10 * 10**9
MIN_OCCUPATION_S = 1.0


# --- intensities -------------------------------------------------------------

@dataclass
class IntensityTable:
    """Events per second by order kind and queue bin (index 0 unused).

    Bins observed for less than ``MIN_OCCUPATION_S`` are NaN.
    """

    lam: Dict[str, np.ndarray]
    occupation: np.ndarray
    counts: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def q_max(self) -> int:
        return len(self.occupation) - 1

    def rate(self, kind: str, q: int) -> float:
        return float(self.lam[kind][q])

    def occupied(self) -> np.ndarray:
        return np.flatnonzero(self.occupation >= MIN_OCCUPATION_S)

    def filled(self) -> "IntensityTable":
        """Copy with masked bins filled from the nearest occupied bin."""
        occ = self.occupied()
        occ = occ[occ >= 1]
        if occ.size == 0:
            raise ValueError("intensity table has no occupied bins")
        lam = {}
        for k, arr in self.lam.items():
            out = arr.copy()
            for q in range(1, len(arr)):
                if not np.isfinite(out[q]):
                    out[q] = arr[occ[np.argmin(np.abs(occ - q))]]
            out[0] = np.nan
            lam[k] = out
        return IntensityTable(lam, self.occupation.copy(), {k: v.copy() for k, v in self.counts.items()})

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(x) else float(x) for x in a]
        return {"lambda": {k: clean(v) for k, v in self.lam.items()},
                "occupation": self.occupation.tolist(),
                "counts": {k: v.astype(int).tolist() for k, v in self.counts.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "IntensityTable":
        lam = {k: np.array([np.nan if x is None else x for x in v], dtype=float)
               for k, v in d["lambda"].items()}
        counts = {k: np.asarray(v, dtype=float) for k, v in d.get("counts", {}).items()}
        return cls(lam, np.asarray(d["occupation"], dtype=float), counts)

    @classmethod
    def from_rates(cls, lam_L, lam_C, lam_M) -> "IntensityTable":
        arrs = [np.concatenate([[np.nan], np.asarray(a, dtype=float)]) for a in (lam_L, lam_C, lam_M)]
        occ = np.full(len(arrs[0]), np.inf)
        occ[0] = 0.0
        return cls(dict(zip(KINDS, arrs)), occ)


def _table_from_counts(counts: Mapping[str, np.ndarray], occ_ns: np.ndarray) -> IntensityTable:
    occ = occ_ns.astype(float) * 1e-9
    lam = {}
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in KINDS:
            r = counts[k] / occ
            r[occ < MIN_OCCUPATION_S] = np.nan
            r[0] = np.nan
            lam[k] = r
    return IntensityTable(lam, occ, {k: np.asarray(counts[k], dtype=float) for k in KINDS})


# --- sufficient statistics ------------------------------------------------------

def _zeros(q_max: int) -> np.ndarray:
    return np.zeros(q_max + 1, dtype=np.int64)


@dataclass
class CalibrationStats:
    """Count-level summary of one or more streams; merging is a plain sum."""

    q_max: int = Q_MAX
    counts: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    occ_ns: Dict[str, np.ndarray] = field(default_factory=dict)
    sizes: Dict[str, Dict[int, Counter]] = field(default_factory=dict)
    follow: Dict[Tuple[str, int], List[int]] = field(default_factory=dict)
    qe_hist: Dict[Tuple[str, str, int], np.ndarray] = field(default_factory=dict)
    dt_hist: Dict[Tuple[str, str, int], np.ndarray] = field(default_factory=dict)
    independence: Dict[Tuple[str, int, int], List[int]] = field(default_factory=dict)
    qr_follow: Dict[Tuple[str, int], List[int]] = field(default_factory=dict)
    revealed: np.ndarray = None  # lots revealed on the emptied side after a follow, index q-1
    records: int = 0
    resyncs: int = 0
    skipped: int = 0

    def __post_init__(self):
        for s in SIDES:
            self.counts.setdefault(s, {k: _zeros(self.q_max) for k in KINDS})
            self.occ_ns.setdefault(s, _zeros(self.q_max))
        for k in KINDS:
            self.sizes.setdefault(k, defaultdict(Counter))
        if self.revealed is None:
            self.revealed = np.zeros(self.q_max, dtype=np.int64)

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        if other.q_max != self.q_max:
            raise ValueError("cannot merge statistics with different q_max")
        out = CalibrationStats(self.q_max)
        for s in SIDES:
            for k in KINDS:
                out.counts[s][k] = self.counts[s][k] + other.counts[s][k]
            out.occ_ns[s] = self.occ_ns[s] + other.occ_ns[s]
        for k in KINDS:
            for src in (self.sizes[k], other.sizes[k]):
                for q, c in src.items():
                    out.sizes[k][q].update(c)
        for name in ("follow", "independence", "qr_follow"):
            acc: Dict = {}
            for src in (getattr(self, name), getattr(other, name)):
                for key, v in src.items():
                    cur = acc.get(key, [0, 0])
                    acc[key] = [cur[0] + v[0], cur[1] + v[1]]
            setattr(out, name, acc)
        for name in ("qe_hist", "dt_hist"):
            acc = {}
            for src in (getattr(self, name), getattr(other, name)):
                for key, v in src.items():
                    acc[key] = acc[key] + v if key in acc else v.copy()
            setattr(out, name, acc)
        out.revealed = self.revealed + other.revealed
        out.records = self.records + other.records
        out.resyncs = self.resyncs + other.resyncs
        out.skipped = self.skipped + other.skipped
        return out

    def pooled_intensities(self) -> IntensityTable:
        counts = {k: self.counts["B"][k] + self.counts["A"][k] for k in KINDS}
        return _table_from_counts(counts, self.occ_ns["B"] + self.occ_ns["A"])

    def side_intensities(self, side: str) -> IntensityTable:
        return _table_from_counts(self.counts[side], self.occ_ns[side])


def diag_bin(contracts: int, width: int = 100) -> int:
    return contracts // width


def accumulate(records: Iterable[Record], q_max: int = Q_MAX, gap_ns: int = GAP_NS) -> CalibrationStats:
    """Single pass over a time-ordered stream."""
    st = CalibrationStats(q_max)
    tracker = BookTracker()
    prev_ts = None
    prev_bid = prev_ask = 0
    for rec in records:
        step = tracker.step(rec)
        if prev_ts is not None:
            dt = rec.ts_ns - prev_ts
            if dt <= gap_ns:
                if prev_bid > 0:
                    st.occ_ns["B"][lots_of(prev_bid, q_max)] += dt
                if prev_ask > 0:
                    st.occ_ns["A"][lots_of(prev_ask, q_max)] += dt
            _count_event(st, step, q_max)
        prev_ts = rec.ts_ns
        prev_bid, prev_ask = tracker.q_bid, tracker.q_ask
        if tracker.emptied is not None:
            if tracker.emptied.value == "B":
                prev_bid = 0
            else:
                prev_ask = 0
    rep = tracker.finish()
    st.records = rep.records
    st.resyncs = rep.resyncs
    st.skipped = rep.unmatched
    return st


def _count_event(st: CalibrationStats, step: Step, q_max: int) -> None:
    rec = step.rec
    est = step.establishment
    if est is not None:
        _count_establishment(st, est, q_max)
        if est.o_e.value == "F":
            revealed = rec.bb_qty if est.side.value == "B" else rec.ba_qty
            if revealed > 0:
                st.revealed[lots_of(revealed, q_max) - 1] += 1
        return
    if not step.at_best:
        return
    pre = step.pre_bid if rec.side == "B" else step.pre_ask
    if pre <= 0:
        return
    qb = lots_of(pre, q_max)
    st.counts[rec.side][rec.kind][qb] += 1
    st.sizes[rec.kind][qb][bin_of(rec.size_contracts)] += 1


def _count_establishment(st: CalibrationStats, est: Establishment, q_max: int) -> None:
    o_r, o_e = est.o_r.value, est.o_e.value
    b = qr_bucket(est.q_r)
    fr = st.follow.setdefault((o_r, b), [0, 0])
    fr[0] += o_e == "F"
    fr[1] += 1
    key = (o_r, o_e, b)
    if key not in st.qe_hist:
        st.qe_hist[key] = np.zeros(q_max, dtype=np.int64)
        st.dt_hist[key] = np.zeros(N_DT_CELLS, dtype=np.int64)
    st.qe_hist[key][min(bin_of(est.q_e), q_max) - 1] += 1
    st.dt_hist[key][dt_cell(est.dt)] += 1
    ind = st.independence.setdefault((o_r, diag_bin(est.q_first), diag_bin(est.q_pre)), [0, 0])
    ind[0] += o_e == "F"
    ind[1] += 1
    qf = st.qr_follow.setdefault((o_r, bin_of(est.q_r)), [0, 0])
    qf[0] += o_e == "F"
    qf[1] += 1


def estimate_intensities(records: Iterable[Record], q_max: int = Q_MAX) -> IntensityTable:
    """Pooled (bid and ask) counts over occupation time per queue bin."""
    return accumulate(records, q_max).pooled_intensities()


# --- size laws ------------------------------------------------------------------

def _truncgeom_score(p: float, groups: Sequence[Tuple[int, float, float]]) -> Tuple[float, float]:
    """First and second derivative of the truncated geometric log-likelihood.

    ``groups`` holds ``(Q, S, M)``: total weight and weighted sum of ``q-1``
    for samples sharing the truncation bound ``Q``.
    """
    d1 = d2 = 0.0
    r = 1.0 - p
    for Q, S, M in groups:
        if S <= 0:
            continue
        rq = r ** Q
        den = 1.0 - rq
        h = Q * r ** (Q - 1) / den
        # dh/dp = -dh/dr, with d(den)/dr = -Q r^(Q-1)
        dh = -(Q * (Q - 1) * r ** (Q - 2) * den + (Q * r ** (Q - 1)) ** 2) / den ** 2 if Q > 1 else 0.0
        d1 += S / p - M / r - S * h
        d2 += -S / p ** 2 - M / r ** 2 - S * dh
    return d1, d2


def truncgeom_mle(groups: Sequence[Tuple[int, float, float]], tol: float = 1e-13) -> float:
    """Root of the score by Newton steps kept inside a shrinking bracket."""
    groups = [g for g in groups if g[1] > 0]
    if not groups:
        raise ValueError("no samples")
    if all(M == 0 for _, _, M in groups):
        return 1.0
    lo, hi = 1e-12, 1.0 - 1e-12
    if _truncgeom_score(hi, groups)[0] > 0:
        return hi
    S = sum(g[1] for g in groups)
    M = sum(g[2] for g in groups)
    p = min(max(S / (S + M), 1e-6), 1 - 1e-6)
    for _ in range(200):
        f, df = _truncgeom_score(p, groups)
        if f > 0:
            lo = p
        else:
            hi = p
        step_ok = df < 0
        nxt = p - f / df if step_ok else 0.5 * (lo + hi)
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        if abs(nxt - p) < tol or hi - lo < tol:
            return nxt
        p = nxt
    return p


def fit_geometric(samples: Sequence[int]) -> GeometricLaw:
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        raise ValueError("no samples")
    return GeometricLaw(min(1.0, 1.0 / arr.mean()))


def fit_truncated_geometric(samples: Sequence[int], Q: int) -> TruncatedGeometricLaw:
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        raise ValueError("no samples")
    if arr.max() > Q:
        raise ValueError(f"sample {arr.max()} exceeds support bound {Q}")
    return TruncatedGeometricLaw(truncgeom_mle([(Q, float(arr.size), float((arr - 1).sum()))]), Q)


@dataclass
class LimitCancelFit:
    p0_L: Dict[int, float]
    p0_C: Dict[int, float]
    flagged: Dict[str, List[int]]
    pooled_L: float
    pooled_C: float


def _counter_moments(c: Mapping[int, int]) -> Tuple[float, float]:
    n = float(sum(c.values()))
    m = float(sum((q - 1) * k for q, k in c.items()))
    return n, m


def fit_limit_cancel(limit_sizes: Mapping[int, Mapping[int, int]],
                     cancel_sizes: Mapping[int, Mapping[int, int]],
                     min_count: int = DEFAULT_MIN_COUNT) -> LimitCancelFit:
    """Per queue bin ``Q``: geometric ``p0 = 1/mean`` for limits, truncated
    geometric MLE for cancellations. Inputs map ``Q -> {size bin: count}``.
    Cells below ``min_count`` fall back to the pooled estimate."""
    flagged = {"L": [], "C": []}
    tot_n = tot_m = 0.0
    for c in limit_sizes.values():
        n, m = _counter_moments(c)
        tot_n += n
        tot_m += m
    pooled_L = tot_n / (tot_n + tot_m) if tot_n > 0 else GeometricLaw(0.64).p0
    groups = []
    for Q, c in cancel_sizes.items():
        n, m = _counter_moments(c)
        if n > 0:
            groups.append((int(Q), n, m))
    pooled_C = truncgeom_mle(groups) if groups else 0.64

    p0_L, p0_C = {}, {}
    for Q, c in limit_sizes.items():
        n, m = _counter_moments(c)
        if n >= min_count:
            p0_L[int(Q)] = n / (n + m)
        else:
            flagged["L"].append(int(Q))
            p0_L[int(Q)] = pooled_L
    for Q, c in cancel_sizes.items():
        n, m = _counter_moments(c)
        if n >= min_count:
            p0_C[int(Q)] = truncgeom_mle([(int(Q), n, m)])
        else:
            flagged["C"].append(int(Q))
            p0_C[int(Q)] = pooled_C
    return LimitCancelFit(p0_L, p0_C, flagged, pooled_L, pooled_C)


@dataclass
class MixtureFit:
    law: MarketSizeMixture
    loglik: float
    iterations: int
    converged: bool
    history: List[float]

    @property
    def monotone(self) -> bool:
        h = self.history
        return all(b >= a - 1e-9 * max(1.0, abs(a)) for a, b in zip(h, h[1:]))


def mixture_loglik(law: MarketSizeMixture, counts: np.ndarray) -> float:
    """Log-likelihood of size counts (``counts[q-1]`` = number of size ``q``)."""
    p = law.pmf_array(len(counts))
    mask = counts > 0
    with np.errstate(divide="ignore"):
        return float((counts[mask] * np.log(p[mask])).sum())


def fit_market_mixture(sizes: Sequence[int], Q: int, max_iter: int = 500,
                       tol: float = 1e-10) -> MixtureFit:
    """EM over latent membership (geometric part vs Dirac atoms)."""
    arr = np.asarray(sizes, dtype=int)
    if arr.size == 0:
        raise ValueError("no samples")
    if arr.min() < 1 or arr.max() > Q:
        raise ValueError(f"market sizes must lie in [1, {Q}]")
    counts = np.bincount(arr - 1, minlength=Q).astype(float)
    return fit_market_mixture_counts(counts, Q, max_iter, tol)


def fit_market_mixture_counts(counts: np.ndarray, Q: int, max_iter: int = 500,
                              tol: float = 1e-10) -> MixtureFit:
    counts = np.asarray(counts, dtype=float)[:Q]
    N = counts.sum()
    q = np.arange(1, Q + 1)
    atoms = np.array(atom_positions(Q), dtype=int)
    is_atom = np.zeros(Q, dtype=bool)
    is_atom[atoms - 1] = True

    non_atom = counts * ~is_atom
    if non_atom.sum() > 0:
        p0 = truncgeom_mle([(Q, non_atom.sum(), float((non_atom * (q - 1)).sum()))])
    else:
        p0 = 0.5
    p0 = min(p0, 1.0 - 1e-9)
    theta_atoms = counts[atoms - 1] / N
    theta0 = non_atom.sum() / N

    def make(p0, theta0, theta_atoms):
        p0, theta0 = float(p0), float(theta0)
        w = [float(t) for t in theta_atoms]
        if (Q - 1) % 5 != 0:
            return MarketSizeMixture(p0, Q, theta0, tuple(w[:-1]), w[-1])
        return MarketSizeMixture(p0, Q, theta0, tuple(w), 0.0)

    law = make(p0, theta0, theta_atoms)
    history = [mixture_loglik(law, counts)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = TruncatedGeometricLaw(p0, Q).pmf_array()
        r0 = np.ones(Q)
        num = theta0 * g[atoms - 1]
        den = num + theta_atoms
        with np.errstate(invalid="ignore", divide="ignore"):
            r0[atoms - 1] = np.where(den > 0, num / den, 0.0)
        w = counts * r0
        theta0 = w.sum() / N
        theta_atoms = counts[atoms - 1] * (1.0 - r0[atoms - 1]) / N
        if w.sum() > 0:
            p0 = min(truncgeom_mle([(Q, w.sum(), float((w * (q - 1)).sum()))]), 1.0 - 1e-12)
        law = make(p0, theta0, theta_atoms)
        ll = mixture_loglik(law, counts)
        history.append(ll)
        if abs(ll - history[-2]) <= tol * max(1.0, abs(ll)):
            converged = True
            break
    if not converged:
        warnings.warn(f"market mixture EM did not converge in {max_iter} iterations (Q={Q})")
    return MixtureFit(law, history[-1], it, converged, history)


# --- regeneration ---------------------------------------------------------------------

def regen_from_stats(st: CalibrationStats) -> RegenerationTable:
    p_follow, qe, dt, counts = {}, {}, {}, {}
    for (o_r, b), (nf, n) in st.follow.items():
        if n > 0:
            k = f"{o_r}|{b}"
            p_follow[k] = nf / n
            counts[k] = n
    for key, h in st.qe_hist.items():
        n = int(h.sum())
        if n > 0:
            k = "|".join(str(x) for x in key)
            qe[k] = (h / n).tolist()
            dt[k] = (st.dt_hist[key] / n).tolist()
            counts[k] = n
    return RegenerationTable(p_follow, qe, dt, counts)


def build_regen_table(records: Iterable[Record], q_max: int = Q_MAX) -> RegenerationTable:
    st = accumulate(records, q_max)
    table = regen_from_stats(st)
    table.counts["_skipped"] = st.skipped
    return table


# --- calibration set --------------------------------------------------------------------

@dataclass
class CalibrationSet:
    intensities: Dict[str, IntensityTable]
    size_laws: Dict[str, Dict[int, object]]
    regen: RegenerationTable
    meta: Dict = field(default_factory=dict)
    q_max: int = Q_MAX
    hidden_law: Optional[DiscreteLaw] = None  # queue revealed behind an emptied best, lots

    def pooled_intensities(self) -> IntensityTable:
        if "pooled" in self.intensities:
            return self.intensities["pooled"]
        b, a = self.intensities["B"], self.intensities["A"]
        counts = {k: b.counts.get(k, 0) + a.counts.get(k, 0) for k in KINDS}
        occ = b.occupation + a.occupation
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = {k: np.where(occ >= MIN_OCCUPATION_S, counts[k] / occ, np.nan) for k in KINDS}
        return IntensityTable(lam, occ, counts)

    def law(self, kind: str, Q: int):
        return self.size_laws[kind][Q]

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "q_max": self.q_max,
            "intensities": {s: t.to_dict() for s, t in self.intensities.items()},
            "size_laws": {k: {str(Q): law.to_dict() for Q, law in sorted(v.items())}
                          for k, v in self.size_laws.items()},
            "regen": self.regen.to_dict(),
            "hidden_law": self.hidden_law.to_dict() if self.hidden_law is not None else None,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CalibrationSet":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported model schema {d.get('schema')!r}")
        return cls(
            intensities={s: IntensityTable.from_dict(t) for s, t in d["intensities"].items()},
            size_laws={k: {int(Q): law_from_dict(l) for Q, l in v.items()} for k, v in d["size_laws"].items()},
            regen=RegenerationTable.from_dict(d["regen"]),
            meta=dict(d.get("meta", {})),
            q_max=int(d.get("q_max", Q_MAX)),
            hidden_law=law_from_dict(d["hidden_law"]) if d.get("hidden_law") else None,
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CalibrationSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _pooled_market_law(st: CalibrationStats, Q: int, min_count: int) -> Optional[MarketSizeMixture]:
    best = None
    for Qc, c in st.sizes["M"].items():
        n = sum(c.values())
        if n >= min_count and Qc >= 1:
            if best is None or abs(Qc - Q) < abs(best - Q):
                best = Qc
    return best


def finalize(st: CalibrationStats, min_count: int = DEFAULT_MIN_COUNT) -> CalibrationSet:
    q_max = st.q_max
    lc = fit_limit_cancel(st.sizes["L"], st.sizes["C"], min_count)
    size_laws: Dict[str, Dict[int, object]] = {"L": {}, "C": {}, "M": {}}
    for Q in range(1, q_max + 1):
        size_laws["L"][Q] = GeometricLaw(min(1.0, lc.p0_L.get(Q, lc.pooled_L)))
        size_laws["C"][Q] = TruncatedGeometricLaw(min(1.0, lc.p0_C.get(Q, lc.pooled_C)), Q)

    flagged_M = []
    fits: Dict[int, MarketSizeMixture] = {}
    for Q, c in st.sizes["M"].items():
        n = sum(c.values())
        if n >= min_count:
            counts = np.zeros(Q)
            for s, k in c.items():
                counts[min(s, Q) - 1] += k
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fits[Q] = fit_market_mixture_counts(counts, Q).law
    for Q in range(1, q_max + 1):
        if Q in fits:
            size_laws["M"][Q] = fits[Q]
            continue
        flagged_M.append(Q)
        if fits:
            near = min(fits, key=lambda k: (abs(k - Q), k))
            size_laws["M"][Q] = fits[near].resized(Q)
        else:
            size_laws["M"][Q] = MarketSizeMixture(0.33, Q, 1.0, (0.0,) * ((Q - 1) // 5), 0.0)

    meta = {
        "records": st.records,
        "resyncs": st.resyncs,
        "skipped_establishments": st.skipped,
        "min_count": min_count,
        "size_counts": {k: {str(Q): int(sum(c.values())) for Q, c in sorted(st.sizes[k].items())}
                        for k in KINDS},
        "flagged": {"L": sorted(lc.flagged["L"]), "C": sorted(lc.flagged["C"]), "M": flagged_M},
        "revealed_count": int(st.revealed.sum()),
    }
    # too few follows: leave it to the simulator's stationary default
    hidden = None
    if st.revealed.sum() >= min_count:
        hidden = DiscreteLaw(tuple((st.revealed / st.revealed.sum()).tolist()))
    return CalibrationSet(
        intensities={"B": st.side_intensities("B"), "A": st.side_intensities("A"),
                     "pooled": st.pooled_intensities()},
        size_laws=size_laws,
        regen=regen_from_stats(st),
        meta=meta,
        q_max=q_max,
        hidden_law=hidden,
    )


def _accumulate_file(args) -> CalibrationStats:
    path, q_max = args
    return accumulate(read_events(path), q_max)


def calibrate(paths: Sequence[Union[str, Path]], q_max: int = Q_MAX, min_count: int = DEFAULT_MIN_COUNT,
              threads: int = 1) -> Tuple[CalibrationSet, CalibrationStats]:
    """Accumulate every file (in parallel when ``threads > 1``), merge, fit."""
    jobs = [(str(p), q_max) for p in paths]
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(_accumulate_file, jobs))
    else:
        parts = [_accumulate_file(j) for j in jobs]
    total = CalibrationStats(q_max)
    for p in parts:
        total = total.merge(p)
    return finalize(total, min_count), total


# --- diagnostics -----------------------------------------------------------------------

REGIME_LOW, REGIME_HIGH = 70, 300  # contracts


def diagnostics(st: CalibrationStats) -> Dict[str, List[List]]:
    """Tables mirroring the empirical checks: follow probability against the
    surviving/emptied queue sizes, against the removal size, the removal-size
    CDF, and the constructive/destructive intensity regimes."""
    out: Dict[str, List[List]] = {}
    rows = [["o_r", "q_first_bin", "q_pre_bin", "n", "n_follow", "p_follow", "se"]]
    for (o_r, fb, sb), (nf, n) in sorted(st.independence.items()):
        p = nf / n
        rows.append([o_r, fb, sb, n, nf, p, math.sqrt(p * (1 - p) / n)])
    out["independence"] = rows

    rows = [["o_r", "q_r_bin", "n", "n_follow", "p_follow", "se"]]
    for (o_r, qb), (nf, n) in sorted(st.qr_follow.items()):
        p = nf / n
        rows.append([o_r, qb, n, nf, p, math.sqrt(p * (1 - p) / n)])
    out["follow_by_qr"] = rows

    rows = [["o_r", "q_r_bin", "cdf"]]
    for o_r in ("M", "C"):
        items = sorted((qb, n) for (o, qb), (_, n) in st.qr_follow.items() if o == o_r)
        tot = sum(n for _, n in items)
        acc = 0
        for qb, n in items:
            acc += n
            rows.append([o_r, qb, acc / tot])
    out["qr_cdf"] = rows

    rows = [["q_bin", "lambda_L", "lambda_CM", "regime"]]
    tab = st.pooled_intensities()
    for qb in tab.occupied():
        if qb < 1:
            continue
        lo_contracts = 10 * (qb - 1)
        regime = "low" if lo_contracts < REGIME_LOW else ("mid" if lo_contracts < REGIME_HIGH else "high")
        rows.append([int(qb), tab.lam["L"][qb], tab.lam["C"][qb] + tab.lam["M"][qb], regime])
    out["intensity_regimes"] = rows
    return out


def write_tables(tables: Mapping[str, List[List]], out_dir: Union[str, Path]) -> List[Path]:
    import csv
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rows in tables.items():
        p = out_dir / f"{name}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for r in rows:
                w.writerow([f"{x:.10g}" if isinstance(x, float) else x for x in r])
        written.append(p)
    return written
