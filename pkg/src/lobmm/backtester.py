"""Replay of event streams with fictitious one-lot market-maker orders.

Our orders never touch the data book. Positions are tracked in contracts:

* R1: a data cancel at our level removes a block whose depth from the tail
  is exponential (capped at the queue); it jumps our order iff that block
  sits ahead of us.
* R2: a market order of ``m`` contracts fills us iff fewer than ``m``
  contracts are ahead.
* R3: a market order that clears the level fills us wherever we stand.
* R4: after a fill the book is the data book (we never modify it).

A limit arriving at or through our level from the other side (the
establishing order after a follow) also fills us, at our price.
Decisions act ``latency_rt`` seconds after the event that triggered them.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .eventio import BookTracker, Record, TrackerReport
from .lob_core import LOT_CONTRACTS, BookState, Side
from .rng import substream

STRATEGIES = ("locally_optimal", "naive")
CANCEL_RULES = ("exponential", "uniform")


class AccountingError(AssertionError):
    pass


@dataclass
class BacktestConfig:
    strategy: str = "naive"
    q_min: int = 0  # contracts, naive only
    latency_rt: float = 200e-6
    lot: int = LOT_CONTRACTS
    max_inventory: int = 8  # lots
    cancel_law_rate: float = 0.1  # per lot of depth from the tail
    cancel_rule: str = "exponential"
    tick_value: float = 10.0  # currency per tick and contract
    seed: int = 0
    check_accounting: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.cancel_rule not in CANCEL_RULES:
            raise ValueError(f"unknown cancel rule {self.cancel_rule!r}")
        if self.latency_rt < 0:
            raise ValueError("latency must be >= 0")
        if self.q_min < 0:
            raise ValueError("q_min must be >= 0")
        if self.max_inventory < 1:
            raise ValueError("max_inventory must be >= 1 lot")
        if self.cancel_law_rate <= 0:
            raise ValueError("cancel_law_rate must be positive")

    @property
    def label(self) -> str:
        return "locally_optimal" if self.strategy == "locally_optimal" else f"naive({self.q_min})"


@dataclass
class FictitiousOrder:
    side: Side
    level: int
    position_ahead: Optional[int]  # contracts; None while resting below the best
    size: int
    submit_time: float


@dataclass
class Fill:
    time: float
    side: str  # "B" we bought, "A" we sold
    price: int  # ticks
    qty: int  # contracts
    reason: str


@dataclass
class BacktestLedger:
    label: str = ""
    fills: List[Fill] = field(default_factory=list)
    inventory: int = 0  # lots, signed
    cash_ticks: float = 0.0  # ticks x contracts
    pnl: float = 0.0  # currency
    turnover: float = 0.0  # currency
    curve: List[Tuple[float, float]] = field(default_factory=list)
    submissions: int = 0
    cancellations: int = 0
    mean_abs_inventory: float = 0.0
    quality: Optional[TrackerReport] = None

    @property
    def profitability(self) -> float:
        """P&L per traded notional in basis points (NaN without trades)."""
        return 1e4 * self.pnl / self.turnover if self.turnover > 0 else float("nan")

    @property
    def traded_contracts(self) -> int:
        return int(sum(f.qty for f in self.fills))

    def fingerprint(self) -> bytes:
        """Byte string of the ledger, for bit-identity checks."""
        out = bytearray()
        for f in self.fills:
            out += struct.pack("<d1sqq", f.time, f.side.encode(), f.price, f.qty)
        out += struct.pack("<qddd", self.inventory, self.cash_ticks, self.pnl, self.turnover)
        return bytes(out)


# --- strategies ------------------------------------------------------------------------

def lots_near(contracts: int) -> int:
    """Nearest whole number of lots."""
    return (contracts + LOT_CONTRACTS // 2) // LOT_CONTRACTS


@dataclass
class PairTable:
    """Go/no-go lookup of the make-the-spread problem over own-queue pairs."""

    Q: int
    values: np.ndarray  # (n_own, n_own) ticks, bid state x ask state
    keep: np.ndarray  # bool, waiting is optimal

    @classmethod
    def from_model(cls, pm) -> "PairTable":
        from .mdp.problems import PAIR_WAIT
        k = pm.kernel
        n = k.n_own
        p0 = pm.layout.start("P")
        pol = pm.solution.policy[p0:p0 + n * n].reshape(n, n)
        return cls(k.Q, pm.value_matrix(), pol == PAIR_WAIT)

    @classmethod
    def load(cls, path) -> "PairTable":
        """From a stored pair (or extended pair) value table."""
        from .mdp.store import pair_block, read_values
        V, meta = read_values(path)
        values, keep = pair_block(V, meta)
        return cls(int(meta["Q"]), values, keep)

    @staticmethod
    def own_index(x: int, y: int) -> int:
        return (x - 1) * x // 2 + (y - 1)

    def state(self, queue: int, ahead: int) -> int:
        """Own-queue index for a data queue and our position (contracts).
        The data queue excludes our lot, so the model queue is one lot more."""
        x = min(lots_near(queue) + 1, self.Q)
        y = min(lots_near(ahead) + 1, x)
        return self.own_index(x, y)

    def go(self, qb: int, ab: int, qa: int, aa: int) -> bool:
        return bool(self.keep[self.state(qb, ab), self.state(qa, aa)])

    def value(self, qb: int, ab: int, qa: int, aa: int) -> float:
        return float(self.values[self.state(qb, ab), self.state(qa, aa)])


class NaiveStrategy:
    """Quote both sides; an order stays only while its queue is longer than
    ``q_min`` contracts."""

    def __init__(self, q_min: int = 0):
        self.q_min = q_min

    def wanted(self, book: "_Book", orders: Dict[Side, FictitiousOrder]) -> Tuple[bool, bool]:
        return book.q_bid > self.q_min, book.q_ask > self.q_min


class LocallyOptimalStrategy:
    """Keep or cancel both orders from the pair table; a missing side is
    valued at the tail of its queue and (re)submitted only when the
    resulting pair is worth keeping."""

    def __init__(self, table: PairTable):
        self.table = table

    def wanted(self, book: "_Book", orders: Dict[Side, FictitiousOrder]) -> Tuple[bool, bool]:
        ob, oa = orders.get(Side.BID), orders.get(Side.ASK)
        ab = ob.position_ahead if ob is not None and book.at_best(ob) else book.q_bid
        aa = oa.position_ahead if oa is not None and book.at_best(oa) else book.q_ask
        go = self.table.go(book.q_bid, ab, book.q_ask, aa)
        return go, go


def make_strategy(config: BacktestConfig, table: Optional[PairTable] = None):
    if config.strategy == "naive":
        return NaiveStrategy(config.q_min)
    if table is None:
        raise ValueError("the locally optimal strategy needs a pair value table")
    return LocallyOptimalStrategy(table)


# --- replay engine ---------------------------------------------------------------------

@dataclass
class _Book:
    bid_px: int
    ask_px: int
    q_bid: int
    q_ask: int
    emptied: Optional[Side]

    @property
    def mid2(self) -> int:
        """Twice the mid price, in ticks (an integer)."""
        return self.bid_px + self.ask_px

    def level(self, side: Side) -> int:
        return self.bid_px if side is Side.BID else self.ask_px

    def queue(self, side: Side) -> int:
        return self.q_bid if side is Side.BID else self.q_ask

    def at_best(self, o: FictitiousOrder) -> bool:
        return o.level == self.level(o.side) and o.position_ahead is not None


class _Replay:
    def __init__(self, config: BacktestConfig, strategy, label: str = ""):
        self.cfg = config
        self.strategy = strategy
        self.rng = substream(config.seed, "backtest:cancel-position")
        self.tracker = BookTracker()
        self.orders: Dict[Side, FictitiousOrder] = {}
        self.pending: List[Tuple[float, int, str, Side]] = []
        self.pending_side: Dict[Side, str] = {}
        self._seq = 0
        self.book: Optional[_Book] = None
        self.led = BacktestLedger(label=label)
        self.inv = 0  # contracts
        self.pnl2 = 0  # running 2 x pnl in ticks x contracts, updated incrementally
        self.t_last = None
        self.abs_inv_time = 0.0
        self.t0 = None

    # accounting
    def _check(self) -> None:
        if not self.cfg.check_accounting:
            return
        # cash + inventory x mid, all in half ticks and exact in integers
        ident = 2 * self.led.cash_ticks + self.inv * self.book.mid2
        if ident != self.pnl2:
            raise AccountingError(f"accounting identity broken: {ident} != {self.pnl2}")

    def _fill(self, t: float, o: FictitiousOrder, reason: str) -> None:
        sign = 1 if o.side is Side.BID else -1
        q = o.size
        self.led.cash_ticks -= sign * o.level * q
        self.inv += sign * q
        # marking at the current mid: the fill adds (mid - price) per bought contract
        self.pnl2 += sign * q * (self.book.mid2 - 2 * o.level)
        self.led.turnover += abs(o.level * q) * self.cfg.tick_value
        self.led.fills.append(Fill(t, o.side.value, o.level, q, reason))
        del self.orders[o.side]

    def _move_mid(self, new_mid2: int) -> None:
        self.pnl2 += self.inv * (new_mid2 - self.book.mid2)

    # order actions
    def _submit(self, t: float, side: Side) -> None:
        b = self.book
        if side in self.orders or b.emptied is side:
            return
        cap = self.cfg.max_inventory * self.cfg.lot
        if (side is Side.BID and self.inv + self.cfg.lot > cap) or (side is Side.ASK and self.inv - self.cfg.lot < -cap):
            return
        self.orders[side] = FictitiousOrder(side, b.level(side), b.queue(side), self.cfg.lot, t)
        self.led.submissions += 1

    def _cancel(self, side: Side) -> None:
        if self.orders.pop(side, None) is not None:
            self.led.cancellations += 1

    def _schedule(self, t: float, action: str, side: Side) -> None:
        if self.pending_side.get(side) == action:
            return
        self.pending_side[side] = action
        self._seq += 1
        heapq.heappush(self.pending, (t + self.cfg.latency_rt, self._seq, action, side))

    def _run_pending(self, until: float) -> None:
        while self.pending and self.pending[0][0] <= until:
            t, seq, action, side = heapq.heappop(self.pending)
            if self.pending_side.get(side) == action:
                del self.pending_side[side]
            if action == "submit":
                self._submit(t, side)
            else:
                self._cancel(side)

    # data events against our orders
    def _cancel_passes(self, queue: int, ahead: int) -> bool:
        if queue <= 0 or ahead <= 0:
            return False
        depth = self.rng.exponential(self.cfg.lot / self.cfg.cancel_law_rate)
        depth = min(depth, queue)
        return queue - depth < ahead

    def _against_orders(self, rec: Record, pre_bid: int, pre_ask: int) -> None:
        t = rec.time
        for side in (Side.BID, Side.ASK):
            o = self.orders.get(side)
            if o is None:
                continue
            if rec.kind == "L" and rec.side != side.value:
                crosses = rec.price_ticks <= o.level if side is Side.BID else rec.price_ticks >= o.level
                if crosses:
                    self._fill(t, o, "cross")
                continue
            if rec.side != side.value or rec.price_ticks != o.level or o.position_ahead is None:
                continue
            post = rec.bb_qty if side is Side.BID else rec.ba_qty
            pre = pre_bid if side is Side.BID else pre_ask
            if rec.kind == "M":
                if post == 0:
                    self._fill(t, o, "clear")  # R3
                elif o.position_ahead < rec.size_contracts:
                    self._fill(t, o, "market")  # R2
                else:
                    o.position_ahead -= rec.size_contracts
            elif rec.kind == "C":
                c = rec.size_contracts
                if self.cfg.cancel_rule == "uniform":
                    # each cancelled contract is ahead of us with probability ahead/queue
                    a = o.position_ahead
                    q = max(pre, a)
                    n = min(c, q)
                    if q > 0 and n > 0:
                        o.position_ahead = a - int(self.rng.hypergeometric(a, q - a, n)) if a > 0 else 0
                elif self._cancel_passes(pre, o.position_ahead):
                    o.position_ahead = max(o.position_ahead - c, 0)  # R1

    def _sync_positions(self) -> None:
        b = self.book
        for o in self.orders.values():
            if o.level == b.level(o.side):
                if o.position_ahead is None:
                    o.position_ahead = b.queue(o.side)
                o.position_ahead = min(o.position_ahead, b.queue(o.side))
            else:
                o.position_ahead = None

    def _decide(self, t: float) -> None:
        b = self.book
        for side, o in list(self.orders.items()):
            if not b.at_best(o) and b.emptied is not side and self.pending_side.get(side) != "cancel":
                self._schedule(t, "cancel", side)
        want = self.strategy.wanted(b, self.orders)
        for side, w in zip((Side.BID, Side.ASK), want):
            if b.emptied is side:
                continue
            o = self.orders.get(side)
            if w and o is None:
                self._schedule(t, "submit", side)
            elif not w and o is not None:
                self._schedule(t, "cancel", side)
            elif w and o is not None and self.pending_side.get(side) == "cancel" and b.at_best(o):
                # a queued cancel is now unwanted; a submit after it restores the order
                self._schedule(t, "submit", side)

    def step(self, rec: Record) -> None:
        t = rec.time
        if self.book is not None:
            self._track_time(t)
            self._run_pending(t)
        tr = self.tracker
        pre_bid, pre_ask = tr.q_bid, tr.q_ask
        if self.book is not None:
            self._against_orders(rec, pre_bid, pre_ask)
        tr.step(rec)
        new = _Book(tr.bid_px, tr.ask_px, tr.q_bid, tr.q_ask, tr.emptied)
        if self.book is None:
            self.book = new
            self.t0 = self.t_last = t
        else:
            self._move_mid(new.mid2)
            self.book = new
        self._sync_positions()
        self._check()
        self._decide(t)

    def _track_time(self, t: float) -> None:
        self.abs_inv_time += abs(self.inv) * (t - self.t_last)
        self.t_last = t

    def close(self, t: Optional[float] = None) -> BacktestLedger:
        led = self.led
        if self.book is not None:
            t = self.t_last if t is None else max(t, self.t_last)
            self._track_time(t)
            for side in list(self.orders):
                self._cancel(side)
            if self.inv != 0:
                # flatten at the touch with a market order
                side = Side.ASK if self.inv > 0 else Side.BID
                o = FictitiousOrder(side, self.book.level(side.other), 0, abs(self.inv), t)
                self.orders[o.side] = o
                self._fill(t, o, "close")
            self._check()
            span = t - self.t0
            led.mean_abs_inventory = self.abs_inv_time / span / self.cfg.lot if span > 0 else 0.0
        led.inventory = self.inv // self.cfg.lot
        led.pnl = self.pnl2 / 2 * self.cfg.tick_value
        led.quality = self.tracker.finish()
        return led

    def mark(self) -> float:
        return self.pnl2 / 2 * self.cfg.tick_value


def replay_day(events: Iterable[Record], config: BacktestConfig, table: Optional[PairTable] = None,
               curve_every: float = 0.0, close_at: Optional[float] = None) -> BacktestLedger:
    """Run one strategy over a record stream and flatten at the end."""
    strategy = make_strategy(config, table)
    rp = _Replay(config, strategy, config.label)
    next_curve = None
    n_fills = 0
    for rec in events:
        rp.step(rec)
        if len(rp.led.fills) != n_fills:
            n_fills = len(rp.led.fills)
            rp.led.curve.append((rec.time, rp.mark()))
        elif curve_every > 0:
            if next_curve is None:
                next_curve = rec.time
            if rec.time >= next_curve:
                rp.led.curve.append((rec.time, rp.mark()))
                next_curve = rec.time + curve_every
    led = rp.close(close_at)
    if rp.book is not None:
        led.curve.append((rp.t_last, led.pnl))
    return led


# --- strategy suite --------------------------------------------------------------------

NAIVE_THRESHOLDS = (0, 250, 400)


def suite_configs(base: Optional[BacktestConfig] = None, thresholds: Sequence[int] = NAIVE_THRESHOLDS,
                  with_optimal: bool = True) -> List[BacktestConfig]:
    from dataclasses import replace
    base = base or BacktestConfig()
    out = [replace(base, strategy="locally_optimal")] if with_optimal else []
    out += [replace(base, strategy="naive", q_min=q) for q in thresholds]
    return out


def _day_row(day: str, led: BacktestLedger) -> dict:
    return {
        "day": day,
        "strategy": led.label,
        "pnl_k": led.pnl / 1e3,
        "turnover_m": led.turnover / 1e6,
        "profitability_bp": led.profitability,
        "fills": len(led.fills),
        "final_inventory": led.inventory,
        "mean_abs_inventory": led.mean_abs_inventory,
        "resyncs": led.quality.resyncs if led.quality else 0,
    }


def run_strategy_suite(days: Sequence[Tuple[str, Sequence[Record]]], configs: Sequence[BacktestConfig],
                       table: Optional[PairTable] = None) -> dict:
    """Per-day and aggregate statistics, plus cumulative P&L curves."""
    rows, curves = [], {}
    totals: Dict[str, List[float]] = {}
    for name, records in days:
        for cfg in configs:
            if cfg.strategy == "locally_optimal" and table is None:
                continue
            led = replay_day(records, cfg, table)
            rows.append(_day_row(name, led))
            acc = totals.setdefault(cfg.label, [0.0, 0.0, 0])
            offset = curves.get(cfg.label, [(0.0, 0.0, "")])[-1][1] if cfg.label in curves else 0.0
            curves.setdefault(cfg.label, []).extend((t, offset + p, name) for t, p in led.curve)
            acc[0] += led.pnl
            acc[1] += led.turnover
            acc[2] += 1
    aggregate = []
    for label, (pnl, turn, n) in totals.items():
        aggregate.append({
            "strategy": label,
            "days": n,
            "pnl_k": pnl / 1e3,
            "turnover_m": turn / 1e6,
            "profitability_bp": 1e4 * pnl / turn if turn > 0 else float("nan"),
        })
    return {"days": rows, "aggregate": aggregate, "curves": curves}


# --- Monte Carlo inside the simulator --------------------------------------------------

SESSION_S = 1800.0
MC_BASE_LEVEL = 3000


@dataclass
class MonteCarloStats:
    label: str
    pnl: np.ndarray  # ticks per session (one-lot orders)
    mean_abs_inventory: np.ndarray
    turnover_contracts: np.ndarray
    horizon_s: float

    @property
    def runs(self) -> int:
        return len(self.pnl)

    @property
    def mean(self) -> float:
        return float(self.pnl.mean()) if self.runs else 0.0

    @property
    def stderr(self) -> float:
        return float(self.pnl.std(ddof=1) / math.sqrt(self.runs)) if self.runs > 1 else float("nan")

    def summary(self) -> dict:
        return {
            "strategy": self.label,
            "runs": self.runs,
            "horizon_s": self.horizon_s,
            "mean_pnl_ticks": self.mean,
            "stderr": self.stderr,
            "mean_abs_inventory": float(self.mean_abs_inventory.mean()) if self.runs else 0.0,
            "turnover_contracts": float(self.turnover_contracts.mean()) if self.runs else 0.0,
        }


def z_score(a: MonteCarloStats, b: MonteCarloStats) -> float:
    """Two-sample statistic for ``mean(a) > mean(b)``."""
    return (a.mean - b.mean) / math.sqrt(a.stderr ** 2 + b.stderr ** 2)


def mc_config(strategy: str, q_min: int = 0, seed: int = 0, latency_rt: float = 200e-6) -> BacktestConfig:
    """Simulator sessions ignore the inventory cap and allocate cancels
    uniformly, like the model the values were solved in."""
    return BacktestConfig(strategy=strategy, q_min=q_min, latency_rt=latency_rt, max_inventory=10**9,
                          cancel_rule="uniform", tick_value=1.0, seed=seed, check_accounting=False)


def monte_carlo_eval(spec, config: BacktestConfig, runs: int, table: Optional[PairTable] = None,
                     horizon_s: Optional[float] = None, seed: int = 0) -> MonteCarloStats:
    """Simulate ``runs`` independent sessions and trade them, closing the
    inventory at the horizon by market orders. P&L is in ticks per lot."""
    from dataclasses import replace

    from .simulator import Engine, birth_death_stationary

    if horizon_s is None:
        horizon_s = SESSION_S
    # sessions open on independent draws from the stationary queue law
    start = birth_death_stationary(spec.lam_L, spec.lam_C + spec.lam_M)[1:]
    pnl, inv, turn = np.zeros(runs), np.zeros(runs), np.zeros(runs)
    for i in range(runs):
        init_rng = substream(seed, f"mc-init:{i}")
        qb, qa = (int(v) + 1 for v in init_rng.choice(len(start), size=2, p=start / start.sum()))
        eng = Engine(spec, substream(seed, f"mc-session:{i}"), BookState(qb, qa, MC_BASE_LEVEL, q_max=spec.q_max))
        records = _session_records(eng, qb, qa, horizon_s)
        cfg = replace(config, seed=int(substream(seed, f"mc-backtest:{i}").integers(2**62)))
        led = replay_day(records, cfg, table, close_at=horizon_s)
        pnl[i] = led.pnl / cfg.tick_value / cfg.lot
        inv[i] = led.mean_abs_inventory
        turn[i] = led.traded_contracts
    return MonteCarloStats(config.label, pnl, inv, turn, horizon_s)


def _session_records(eng, qb: int, qa: int, horizon_s: float) -> List[Record]:
    from .lob_core import contracts_of
    from .simulator import _record
    st = eng.state
    # a snapshot record opens the session so the tracker knows the book
    first = Record(0, "L", "B", st.p_ref, 1, contracts_of(qb), contracts_of(qa))
    return [first] + [_record(ev, 0) for ev in eng.events(horizon_s)]
