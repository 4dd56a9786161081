"""Built-in synthetic calibrations.

``desk_futures`` is a desk-scale index-futures book (lots capped at ``q_max``)
with realistic size laws and regeneration; ``model0_stable`` is a unit-size book whose limit rate
crosses the removal rate at a chosen queue size.
"""

from __future__ import annotations

import math
from typing import Dict, Tuple

import numpy as np

from .calibration import CalibrationSet, IntensityTable
from .order_flow import (
    DT_LO,
    DT_WIDTH,
    N_DT_CELLS,
    DiscreteLaw,
    GeometricLaw,
    MarketSizeMixture,
    RegenerationTable,
    TruncatedGeometricLaw,
)

P0_LIMIT = 0.6421
P0_CANCEL = 0.6578
# (p0, theta0, atom weights) per queue bin; when Q != 5n+1 the last weight is
# the clearing atom. Rows are rounded to 1e-4 and sum to 1 only within that.
MARKET_TABLE = {
    21: (0.3486, 0.8357, (0.0185, 0.0338, 0.0081, 0.1038)),
    22: (0.3557, 0.8311, (0.0198, 0.0338, 0.0094, 0.0215, 0.0844)),
    23: (0.3383, 0.8517, (0.0148, 0.0366, 0.0084, 0.0188, 0.0697)),
    24: (0.3327, 0.8475, (0.0108, 0.0373, 0.0099, 0.0192, 0.0753)),
    25: (0.3333, 0.8310, (0.0234, 0.0379, 0.0084, 0.0214, 0.0779)),
    26: (0.3292, 0.8391, (0.0203, 0.0408, 0.0115, 0.0167, 0.0716)),
    27: (0.3250, 0.8374, (0.0188, 0.0369, 0.0114, 0.0220, 0.0116, 0.0619)),
    28: (0.3134, 0.8351, (0.0191, 0.0452, 0.0086, 0.0201, 0.0164, 0.0554)),
    29: (0.3090, 0.8262, (0.0192, 0.0476, 0.0086, 0.0181, 0.0135, 0.0668)),
    30: (0.3050, 0.8426, (0.0205, 0.0402, 0.0096, 0.0188, 0.0103, 0.0580)),
}
MARKET_ROW_Q21 = MARKET_TABLE[21]
LIMIT_P0_TABLE = dict(zip(range(21, 31), (0.6421, 0.6415, 0.6458, 0.6410, 0.6443, 0.6430, 0.6418, 0.6439,
                                          0.6404, 0.6387)))
CANCEL_P0_TABLE = dict(zip(range(21, 31), (0.6578, 0.6591, 0.6600, 0.6623, 0.6598, 0.6611, 0.6557, 0.6554,
                                           0.6538, 0.6496)))


def market_table_law(Q: int) -> MarketSizeMixture:
    """Tabulated market-size row for ``Q``, renormalized to an exact pmf."""
    p0, theta0, w = MARKET_TABLE[Q]
    return MarketSizeMixture.from_table_row(Q, p0, theta0, w, renormalize=True)

# daily counts of (removal kind, establish kind) per removal-size bucket and
# the mean establishing size in contracts for each cell
FOLLOW_COUNTS = {
    ("M", "F"): (3623, 1128, 2802),
    ("M", "R"): (1153, 180, 75),
    ("C", "F"): (906, 112, 23),
    ("C", "R"): (2552, 243, 26),
}
QE_MEAN_CONTRACTS = {
    ("M", "F"): (7.46, 10.18, 27.93),
    ("M", "R"): (6.69, 6.75, 27.98),
    ("C", "F"): (7.22, 7.45, 9.08),
    ("C", "R"): (5.60, 7.71, 7.99),
}
# log10 seconds of the establishment delay: follows come fast, reverts slower
DT_LOG_MEAN = {"F": -3.6, "R": -2.8}
DT_LOG_SD = {"F": 0.5, "R": 0.8}


def contracts_geometric_bins(mean_contracts: float, q_max: int) -> np.ndarray:
    """Lot-bin pmf of a geometric contract count with the given mean."""
    p = 1.0 / mean_contracts
    c_hi = 10 * q_max
    c = np.arange(1, c_hi + 1)
    pc = p * (1 - p) ** (c - 1)
    out = np.zeros(q_max)
    np.add.at(out, np.minimum(c // 10 + 1, q_max) - 1, pc)
    out[-1] += max(0.0, 1.0 - out.sum())
    return out / out.sum()


def log_normal_dt(mu: float, sd: float) -> np.ndarray:
    edges = DT_LO + DT_WIDTH * np.arange(N_DT_CELLS + 1)
    cdf = np.array([0.5 * (1 + math.erf((e - mu) / (sd * math.sqrt(2)))) for e in edges])
    w = np.diff(cdf)
    w[0] += cdf[0]
    w[-1] += 1 - cdf[-1]
    return w / w.sum()


def futures_regen(q_max: int) -> RegenerationTable:
    p_follow, qe, dt, counts = {}, {}, {}, {}
    for o_r in ("M", "C"):
        for b in range(3):
            nf = FOLLOW_COUNTS[(o_r, "F")][b]
            nr = FOLLOW_COUNTS[(o_r, "R")][b]
            p_follow[f"{o_r}|{b}"] = nf / (nf + nr)
            counts[f"{o_r}|{b}"] = nf + nr
            for o_e, n in (("F", nf), ("R", nr)):
                k = f"{o_r}|{o_e}|{b}"
                qe[k] = contracts_geometric_bins(QE_MEAN_CONTRACTS[(o_r, o_e)][b], q_max).tolist()
                dt[k] = log_normal_dt(DT_LOG_MEAN[o_e], DT_LOG_SD[o_e]).tolist()
                counts[k] = n
    return RegenerationTable(p_follow, qe, dt, counts)


def side_only_regen(p_follow: float, q_max: int) -> RegenerationTable:
    """Regeneration table whose follow probability ignores the removal."""
    pf, qe, dt, counts = {}, {}, {}, {}
    geo = GeometricLaw(P0_LIMIT).pmf_array(q_max)
    geo[-1] += 1 - geo.sum()
    for o_r in ("M", "C"):
        for b in range(3):
            pf[f"{o_r}|{b}"] = p_follow
            counts[f"{o_r}|{b}"] = 1000
            for o_e in ("F", "R"):
                qe[f"{o_r}|{o_e}|{b}"] = geo.tolist()
                dt[f"{o_r}|{o_e}|{b}"] = log_normal_dt(-3.2, 0.7).tolist()
                counts[f"{o_r}|{o_e}|{b}"] = 500
    return RegenerationTable(pf, qe, dt, counts)


def size_laws(q_max: int) -> Dict[str, Dict[int, object]]:
    base = MarketSizeMixture.from_table_row(21, *MARKET_ROW_Q21, renormalize=True)
    return {
        "L": {Q: GeometricLaw(P0_LIMIT) for Q in range(1, q_max + 1)},
        "C": {Q: TruncatedGeometricLaw(P0_CANCEL, Q) for Q in range(1, q_max + 1)},
        "M": {Q: base.resized(Q) for Q in range(1, q_max + 1)},
    }


# two regimes: short queues are drained by heavy market flow (price moves
# and adverse fills), long queues are stable
LIMIT_BASE, LIMIT_SLOPE = 2.0, 0.04
CANCEL_SLOPE = 0.145
MARKET_FLOOR, MARKET_BURST, MARKET_DECAY = 0.13, 4.7, 2.0
REVEALED_MEAN_LOTS = 2.0


def desk_futures_rates(q_max: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-second rates on lot bins ``1..q_max``."""
    q = np.arange(1, q_max + 1, dtype=float)
    lam_L = LIMIT_BASE + LIMIT_SLOPE * q
    lam_C = CANCEL_SLOPE * q
    lam_M = MARKET_FLOOR + MARKET_BURST * np.exp(-(q - 1) / MARKET_DECAY)
    return lam_L, lam_C, lam_M


def revealed_law(q_max: int, mean_lots: float = REVEALED_MEAN_LOTS) -> DiscreteLaw:
    """Geometric queue behind an emptied best, tail folded into ``q_max``."""
    h = GeometricLaw(1.0 / mean_lots).pmf_array(q_max)
    h[-1] += 1.0 - h.sum()
    return DiscreteLaw(tuple(h.tolist()))


def desk_futures(q_max: int = 20) -> CalibrationSet:
    lam = IntensityTable.from_rates(*desk_futures_rates(q_max))
    return CalibrationSet(
        intensities={"B": lam, "A": lam, "pooled": lam},
        size_laws=size_laws(q_max),
        regen=futures_regen(q_max),
        meta={"source": "synthetic desk-futures"},
        q_max=q_max,
        hidden_law=revealed_law(q_max),
    )


def model0_rates(q_max: int, q_star: int, slope: float = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit-size rates with ``lam_L(q_star) = lam_C + lam_M`` at ``q_star``."""
    slope = 1.0 / q_star if slope is None else slope
    q = np.arange(1, q_max + 1, dtype=float)
    lam_L = np.maximum(1.0 + slope * (q_star - q), 0.05)
    removal = np.maximum(1.0 - slope * (q_star - q), 0.02)
    return lam_L, 0.7 * removal, 0.3 * removal


def model0_stable(q_max: int = 50, q_star: int = 30, p_follow: float = 0.5) -> CalibrationSet:
    lam = IntensityTable.from_rates(*model0_rates(q_max, q_star))
    return CalibrationSet(
        intensities={"B": lam, "A": lam, "pooled": lam},
        size_laws=size_laws(q_max),
        regen=side_only_regen(p_follow, q_max),
        meta={"source": f"synthetic model-0 stable, crossing at {q_star}"},
        q_max=q_max,
    )


def matched_size_laws(q_max: int, p0: float = P0_LIMIT) -> Dict[str, Dict[int, object]]:
    """Limit, cancel and market sizes sharing one geometric shape, so a book
    with these laws drifts to the same queue size as its unit-size version."""
    return {
        "L": {Q: GeometricLaw(p0) for Q in range(1, q_max + 1)},
        "C": {Q: TruncatedGeometricLaw(p0, Q) for Q in range(1, q_max + 1)},
        "M": {Q: TruncatedGeometricLaw(p0, Q) for Q in range(1, q_max + 1)},
    }


def model0_matched(q_max: int = 50, q_star: int = 30) -> CalibrationSet:
    """``model0_stable`` rates with matched size laws; Models 0 and II then
    differ only in how much each event moves the queue."""
    cal = model0_stable(q_max, q_star)
    cal.size_laws = matched_size_laws(q_max)
    cal.meta = {"source": f"synthetic model-0 stable with matched sizes, crossing at {q_star}"}
    return cal


BUILTIN = {"desk-futures": desk_futures, "model0-stable": model0_stable, "model0-matched": model0_matched}
