import math
import warnings
import numpy as np
import pytest
from hypothesis import given, strategies as st

from lobmm.backtester import (
    AccountingError,
    BacktestConfig,
    PairTable,
    _Replay,
    lots_near,
    make_strategy,
    mc_config,
    monte_carlo_eval,
    replay_day,
    run_strategy_suite,
    suite_configs,
    z_score,
)
from lobmm.eventio import Record
from lobmm.lob_core import Side
from lobmm.mdp.kernel import SideKernel
from lobmm.mdp.problems import solve_pair
from lobmm.simulator import ModelSpec, run, to_records
from lobmm.synthetic import desk_futures


def R(t, kind, side, px, size, bb, ba):
    return Record(int(t * 1e9), kind, side, px, size, bb, ba)


def _replay(records, **kw):
    cfg = BacktestConfig(latency_rt=0.0, **kw)
    rp = _Replay(cfg, make_strategy(cfg))
    for r in records:
        rp.step(r)
    return rp


# the snapshot opens the day; our orders join on the next event
def _book_with_bid_ahead(ahead):
    return [R(0, "L", "B", 100, 5, ahead, 50), R(1, "L", "A", 101, 5, ahead, 55)]


def test_r2_market_larger_than_position_fills():
    recs = _book_with_bid_ahead(20) + [R(2, "L", "B", 100, 40, 60, 55), R(3, "M", "B", 100, 30, 30, 55)]
    rp = _replay(recs)
    assert [f.reason for f in rp.led.fills] == ["market"]
    assert rp.led.fills[0].side == "B" and rp.led.fills[0].price == 100


def test_r2_market_smaller_than_position_does_not_fill():
    recs = _book_with_bid_ahead(40) + [R(2, "L", "B", 100, 20, 60, 55), R(3, "M", "B", 100, 30, 30, 55)]
    rp = _replay(recs)
    assert rp.led.fills == []
    assert rp.orders[Side.BID].position_ahead == 10


def test_r3_clearing_market_fills_last_in_queue():
    recs = _book_with_bid_ahead(20) + [R(2, "M", "B", 100, 20, 0, 55)]
    rp = _replay(recs)
    assert [f.reason for f in rp.led.fills] == ["clear"]


@pytest.mark.parametrize("rate, passes", [(1e9, False), (1e-9, True)])
def test_r1_cancel_depth_from_tail(rate, passes):
    # a tiny rate puts the cancelled block at the front (passes us), a huge
    # one at the tail (behind us)
    recs = _book_with_bid_ahead(40) + [R(2, "L", "B", 100, 20, 60, 55), R(3, "C", "B", 100, 10, 50, 55)]
    rp = _replay(recs, cancel_law_rate=rate)
    assert rp.orders[Side.BID].position_ahead == (30 if passes else 40)


def test_r1_exponential_law_mean():
    cfg = BacktestConfig(cancel_law_rate=0.1)
    rp = _Replay(cfg, make_strategy(cfg))
    # 300 ahead in a 400-contract queue: the cancel passes iff it sits deeper than 100 from the tail
    n = 20_000
    hits = sum(rp._cancel_passes(400, 300) for _ in range(n))
    p = math.exp(-0.1 * 100 / 10)
    assert abs(hits / n - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_r4_book_is_the_data_after_fill():
    recs = _book_with_bid_ahead(20) + [R(2, "L", "B", 100, 40, 60, 55), R(3, "M", "B", 100, 30, 30, 55)]
    rp = _replay(recs)
    assert rp.led.fills
    assert (rp.book.q_bid, rp.book.q_ask) == (30, 55)
    assert (rp.tracker.q_bid, rp.tracker.q_ask) == (recs[-1].bb_qty, recs[-1].ba_qty)


def test_cross_from_establishing_limit_fills():
    # ask emptied, the bid side establishes at our ask level
    recs = [R(0, "L", "B", 100, 5, 30, 10), R(1, "L", "B", 100, 5, 35, 10),
            R(2, "C", "A", 101, 10, 35, 0), R(3, "L", "B", 101, 5, 5, 45)]
    rp = _replay(recs)
    assert [(f.side, f.reason, f.price) for f in rp.led.fills] == [("A", "cross", 101)]


def test_latency_delays_orders():
    recs = [R(0, "L", "B", 100, 5, 20, 50), R(0.5, "M", "B", 100, 20, 0, 50)]
    late = replay_day(recs, BacktestConfig(latency_rt=1.0))
    fast = replay_day(recs, BacktestConfig(latency_rt=1e-4))
    assert late.fills == []
    assert [f.reason for f in fast.fills] == ["clear", "close"]


def test_round_trip_pnl_and_turnover():
    recs = [R(0, "L", "B", 100, 5, 10, 10), R(1, "L", "A", 101, 5, 10, 15),
            R(2, "M", "B", 100, 10, 0, 15),  # clears the bid: we buy at 100
            R(3, "L", "B", 100, 10, 10, 15),  # the bid level is refilled
            R(4, "M", "A", 101, 15, 10, 0)]  # clears the ask: we sell at 101
    led = replay_day(recs, BacktestConfig(latency_rt=0.0, tick_value=10.0))
    assert [(f.side, f.price) for f in led.fills] == [("B", 100), ("A", 101)]
    assert led.inventory == 0
    assert led.pnl == 10 * 10 * 1
    assert led.turnover == (100 + 101) * 10 * 10.0


def test_zero_fills_gives_nan_profitability():
    led = replay_day(_book_with_bid_ahead(20), BacktestConfig(latency_rt=0.0))
    assert led.pnl == 0 and led.turnover == 0
    assert math.isnan(led.profitability)


def test_inventory_cap_suppresses_bids():
    recs = [R(0, "L", "B", 100, 5, 10, 500)]
    t = 1
    for _ in range(6):
        recs += [R(t, "L", "B", 100, 10, 10, 500), R(t + 0.5, "M", "B", 100, 10, 0, 500)]
        t += 1
    led = replay_day(recs, BacktestConfig(latency_rt=0.0, max_inventory=2))
    assert sum(f.side == "B" for f in led.fills if f.reason != "close") == 2


def test_close_flattens_at_touch():
    recs = _book_with_bid_ahead(20) + [R(2, "M", "B", 100, 20, 0, 55), R(3, "L", "B", 99, 5, 5, 55)]
    led = replay_day(recs, BacktestConfig(latency_rt=0.0))
    assert led.fills[-1].reason == "close" and led.inventory == 0


def test_config_validation():
    with pytest.raises(ValueError):
        BacktestConfig(latency_rt=-1)
    with pytest.raises(ValueError):
        BacktestConfig(q_min=-5)
    with pytest.raises(ValueError):
        BacktestConfig(max_inventory=0)
    with pytest.raises(ValueError):
        BacktestConfig(strategy="greedy")
    with pytest.raises(ValueError):
        make_strategy(BacktestConfig(strategy="locally_optimal"))


def test_naive_threshold_holds_back():
    recs = _book_with_bid_ahead(20) + [R(2, "M", "B", 100, 20, 0, 55)]
    led = replay_day(recs, BacktestConfig(latency_rt=0.0, q_min=250))
    assert led.fills == []


@given(st.integers(0, 10_000))
def test_lots_near_rounds(c):
    assert abs(lots_near(c) * 10 - c) <= 5


# --- golden synthetic day ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def golden():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec = ModelSpec.from_calibration(desk_futures(20), "II", seed=2024, q_max=20)
    res = run(spec, 1800.0, record=True)
    recs = to_records(res.path, price_offset=5000)
    k = SideKernel.from_spec(spec)
    table = PairTable.from_model(solve_pair(k, S=1))
    return spec, recs, table


def test_accounting_identity_every_event(golden):
    _, recs, table = golden
    for cfg in suite_configs(BacktestConfig(check_accounting=True)):
        led = replay_day(recs, cfg, table)  # raises AccountingError on any violation
        assert led.inventory == 0
        cash = sum((-1 if f.side == "B" else 1) * f.price * f.qty for f in led.fills)
        assert led.pnl == cash * cfg.tick_value


def test_accounting_check_detects_tampering(golden):
    _, recs, _ = golden
    cfg = BacktestConfig()
    rp = _Replay(cfg, make_strategy(cfg))
    for r in recs[:200]:
        rp.step(r)
    rp.pnl2 += 1
    with pytest.raises(AccountingError):
        rp._check()


def test_bit_identical_ledgers(golden):
    _, recs, table = golden
    for cfg in suite_configs():
        assert replay_day(recs, cfg, table).fingerprint() == replay_day(recs, cfg, table).fingerprint()
    a = replay_day(recs, BacktestConfig(seed=1))
    b = replay_day(recs, BacktestConfig(seed=2))
    assert a.fingerprint() != b.fingerprint()


def test_suite_report(golden):
    _, recs, table = golden
    rep = run_strategy_suite([("d1", recs[: len(recs) // 2]), ("d2", recs[len(recs) // 2:])], suite_configs(),
                             table)
    labels = [a["strategy"] for a in rep["aggregate"]]
    assert labels == ["locally_optimal", "naive(0)", "naive(250)", "naive(400)"]
    assert len(rep["days"]) == 8
    for a in rep["aggregate"]:
        days = [d for d in rep["days"] if d["strategy"] == a["strategy"]]
        assert a["pnl_k"] == pytest.approx(sum(d["pnl_k"] for d in days))
        curve = rep["curves"][a["strategy"]]
        assert curve[-1][1] / 1e3 == pytest.approx(a["pnl_k"])


def test_suite_skips_optimal_without_table(golden):
    _, recs, _ = golden
    rep = run_strategy_suite([("d", recs[:500])], suite_configs(thresholds=(0,)))
    assert [a["strategy"] for a in rep["aggregate"]] == ["naive(0)"]


def test_pair_table_state_mapping():
    t = PairTable(4, np.zeros((10, 10)), np.zeros((10, 10), dtype=bool))
    assert t.state(0, 0) == t.own_index(1, 1)
    assert t.state(25, 25) == t.own_index(4, 4)  # 3 lots + our own, at the tail
    assert t.state(500, 0) == t.own_index(4, 1)


# --- Monte Carlo -----------------------------------------------------------------------------

def test_mc_never_entering_is_zero(golden):
    spec, _, table = golden
    never = PairTable(table.Q, table.values * 0, np.zeros_like(table.keep))
    st_ = monte_carlo_eval(spec, mc_config("locally_optimal"), 4, never, horizon_s=60)
    assert (st_.pnl == 0).all() and (st_.turnover_contracts == 0).all()


def test_mc_is_deterministic(golden):
    spec, _, _ = golden
    a = monte_carlo_eval(spec, mc_config("naive"), 3, horizon_s=60, seed=5)
    b = monte_carlo_eval(spec, mc_config("naive"), 3, horizon_s=60, seed=5)
    assert np.array_equal(a.pnl, b.pnl) and np.array_equal(a.turnover_contracts, b.turnover_contracts)
    assert a.summary()["runs"] == 3


def test_z_score():
    from lobmm.backtester import MonteCarloStats
    a = MonteCarloStats("a", np.array([1.0, 3.0]), np.zeros(2), np.zeros(2), 1)
    b = MonteCarloStats("b", np.array([0.0, 0.0]), np.zeros(2), np.zeros(2), 1)
    assert z_score(a, b) == pytest.approx(2.0 / 1.0)
