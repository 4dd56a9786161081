"""Order-size laws, the market-order geometric/Dirac mixture, and the
conditional regeneration tables used when a best limit is emptied."""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .lob_core import EstablishEvent, EstablishKind, RemovalKind, LOT_CONTRACTS, contracts_of


class ConfigError(Exception):
    pass


def _cdf_list(pmf: Sequence[float]) -> List[float]:
    c = np.cumsum(np.asarray(pmf, dtype=float))
    c /= c[-1]
    return c.tolist()


def _invert(cdf: List[float], u: float) -> int:
    """Index (0-based) of the first cdf entry strictly above ``u``."""
    i = bisect_right(cdf, u)
    return min(i, len(cdf) - 1)


@dataclass(frozen=True)
class GeometricLaw:
    p0: float

    def __post_init__(self):
        if not 0.0 < self.p0 <= 1.0:
            raise ConfigError(f"geometric p0 must lie in (0, 1], got {self.p0}")

    support_max = None

    def pmf(self, q: int) -> float:
        if q < 1:
            return 0.0
        return self.p0 * (1.0 - self.p0) ** (q - 1)

    def pmf_array(self, n: int) -> np.ndarray:
        q = np.arange(1, n + 1)
        return self.p0 * (1.0 - self.p0) ** (q - 1)

    def mean(self) -> float:
        return 1.0 / self.p0

    def sample(self, rng) -> int:
        if self.p0 >= 1.0:
            rng.random()
            return 1
        u = rng.random()
        # inverse cdf: smallest q with 1 - (1-p)^q > u
        return max(1, int(math.floor(math.log1p(-u) / math.log1p(-self.p0))) + 1)

    def to_dict(self) -> dict:
        return {"type": "geometric", "p0": self.p0}


@dataclass(frozen=True)
class TruncatedGeometricLaw:
    p0: float
    Q: int

    def __post_init__(self):
        if not 0.0 < self.p0 <= 1.0:
            raise ConfigError(f"truncated geometric p0 must lie in (0, 1], got {self.p0}")
        if self.Q < 1:
            raise ConfigError(f"support bound Q must be >= 1, got {self.Q}")

    @property
    def support_max(self) -> int:
        return self.Q

    @property
    def norm(self) -> float:
        return -math.expm1(self.Q * math.log1p(-self.p0)) if self.p0 < 1.0 else 1.0

    def pmf(self, q: int) -> float:
        if q < 1 or q > self.Q:
            return 0.0
        return self.p0 * (1.0 - self.p0) ** (q - 1) / self.norm

    def pmf_array(self, n: Optional[int] = None) -> np.ndarray:
        n = self.Q if n is None else n
        q = np.arange(1, n + 1)
        out = self.p0 * (1.0 - self.p0) ** (q - 1) / self.norm
        out[q > self.Q] = 0.0
        return out

    def sample(self, rng) -> int:
        return _invert(_cached_cdf(self), rng.random()) + 1

    def to_dict(self) -> dict:
        return {"type": "truncated_geometric", "p0": self.p0, "Q": self.Q}


def atom_positions(Q: int) -> List[int]:
    """Dirac positions of the market-size mixture for queue bin ``Q``.

    Multiples-of-50 atoms sit at ``5k+1``; the clearing atom at ``Q`` is a
    separate position only when ``Q`` is not itself of the form ``5n+1``.
    """
    K = (Q - 1) // 5
    pos = [5 * k + 1 for k in range(1, K + 1)]
    if (Q - 1) % 5 != 0:
        pos.append(Q)
    return pos


WEIGHT_SUM_TOL = 1e-3


@dataclass(frozen=True)
class MarketSizeMixture:
    """``theta0`` x truncated geometric + Dirac atoms.

    ``theta`` holds ``theta_1..theta_K``; ``theta_inf`` is the clearing atom at
    ``q = Q`` and must be 0 when ``Q = 5n+1`` (then ``theta_K`` sits at ``Q``).
    """

    p0: float
    Q: int
    theta0: float
    theta: Tuple[float, ...] = ()
    theta_inf: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        K = (self.Q - 1) // 5
        if len(self.theta) != K:
            raise ConfigError(f"Q={self.Q} needs {K} theta_k weights, got {len(self.theta)}")
        if (self.Q - 1) % 5 == 0 and self.theta_inf != 0.0:
            raise ConfigError(f"Q={self.Q} is 5n+1: the clearing atom is theta_{K}, theta_inf must be 0")
        ws = (self.theta0, *self.theta, self.theta_inf)
        if any(w < -1e-12 for w in ws):
            raise ConfigError(f"negative mixture weight in {ws}")
        # tabulated weights are rounded to 1e-4; anything looser is a mistake
        if abs(sum(ws) - 1.0) > WEIGHT_SUM_TOL:
            raise ConfigError(f"mixture weights sum to {sum(ws)!r}, not 1")
        TruncatedGeometricLaw(self.p0, self.Q)

    @classmethod
    def from_table_row(cls, Q: int, p0: float, theta0: float, thetas: Sequence[float],
                       renormalize: bool = False) -> "MarketSizeMixture":
        """Build from a table row listing theta_1.. where the extra trailing
        weight (if ``Q != 5n+1``) is the clearing atom."""
        K = (Q - 1) // 5
        thetas = list(thetas)
        theta_inf = 0.0
        if (Q - 1) % 5 != 0:
            if len(thetas) != K + 1:
                raise ConfigError(f"Q={Q} row needs {K + 1} atom weights, got {len(thetas)}")
            theta_inf = thetas.pop()
        elif len(thetas) != K:
            raise ConfigError(f"Q={Q} row needs {K} atom weights, got {len(thetas)}")
        if renormalize:
            s = theta0 + sum(thetas) + theta_inf
            theta0, thetas, theta_inf = theta0 / s, [t / s for t in thetas], theta_inf / s
        return cls(p0, Q, theta0, tuple(thetas), theta_inf)

    @property
    def support_max(self) -> int:
        return self.Q

    def normalized(self) -> "MarketSizeMixture":
        s = self.theta0 + sum(self.theta) + self.theta_inf
        return MarketSizeMixture(self.p0, self.Q, self.theta0 / s, tuple(t / s for t in self.theta),
                                 self.theta_inf / s)

    @property
    def geometric(self) -> TruncatedGeometricLaw:
        return TruncatedGeometricLaw(self.p0, self.Q)

    def atoms(self) -> List[Tuple[int, float]]:
        weights = list(self.theta)
        if (self.Q - 1) % 5 != 0:
            weights.append(self.theta_inf)
        return list(zip(atom_positions(self.Q), weights))

    def pmf(self, q: int) -> float:
        if q < 1 or q > self.Q:
            return 0.0
        out = self.theta0 * self.geometric.pmf(q)
        for a, w in self.atoms():
            if a == q:
                out += w
        return out

    def pmf_array(self, n: Optional[int] = None) -> np.ndarray:
        n = self.Q if n is None else n
        out = self.theta0 * self.geometric.pmf_array(n)
        for a, w in self.atoms():
            if a <= n:
                out[a - 1] += w
        return out

    def resized(self, Q: int) -> "MarketSizeMixture":
        """Carry the law over to another queue bin: keep ``p0``, the atoms that
        still fit and the clearing mass; dropped atom mass goes to theta0."""
        if Q == self.Q:
            return self
        old_split = (self.Q - 1) % 5 == 0
        inner = list(self.theta[:-1] if old_split and self.theta else self.theta)
        clearing = (self.theta[-1] if self.theta else 0.0) if old_split else self.theta_inf
        if Q == 1:
            return MarketSizeMixture(self.p0, 1, 1.0, (), 0.0)
        K = (Q - 1) // 5
        new_split = (Q - 1) % 5 == 0
        n_inner = K - 1 if new_split else K
        keep = (inner + [0.0] * n_inner)[:n_inner]
        theta0 = max(0.0, 1.0 - sum(keep) - clearing)
        if new_split:
            return MarketSizeMixture(self.p0, Q, theta0, tuple(keep + [clearing]), 0.0)
        return MarketSizeMixture(self.p0, Q, theta0, tuple(keep), clearing)

    def sample(self, rng) -> int:
        return _invert(_cached_cdf(self), rng.random()) + 1

    def to_dict(self) -> dict:
        return {"type": "market_mixture", "p0": self.p0, "Q": self.Q, "theta0": self.theta0,
                "theta": list(self.theta), "theta_inf": self.theta_inf}


@dataclass(frozen=True)
class DiscreteLaw:
    """Empirical pmf over ``1..len(pmf)``."""

    pmf_values: Tuple[float, ...]

    def __post_init__(self):
        arr = np.asarray(self.pmf_values, dtype=float)
        if arr.ndim != 1 or arr.size == 0 or (arr < 0).any() or abs(arr.sum() - 1.0) > 1e-6:
            raise ConfigError("discrete law must be a nonnegative pmf summing to 1")
        object.__setattr__(self, "pmf_values", tuple((arr / arr.sum()).tolist()))

    @property
    def support_max(self) -> int:
        return len(self.pmf_values)

    def pmf(self, q: int) -> float:
        return self.pmf_values[q - 1] if 1 <= q <= len(self.pmf_values) else 0.0

    def pmf_array(self, n: Optional[int] = None) -> np.ndarray:
        n = len(self.pmf_values) if n is None else n
        out = np.zeros(n)
        m = min(n, len(self.pmf_values))
        out[:m] = self.pmf_values[:m]
        return out

    def sample(self, rng) -> int:
        return _invert(_cached_cdf(self), rng.random()) + 1

    def to_dict(self) -> dict:
        return {"type": "discrete", "pmf": list(self.pmf_values)}


_CDF_CACHE: Dict[object, List[float]] = {}


def _cached_cdf(law) -> List[float]:
    c = _CDF_CACHE.get(law)
    if c is None:
        if len(_CDF_CACHE) > 4096:
            _CDF_CACHE.clear()
        c = _cdf_list(law.pmf_array())
        _CDF_CACHE[law] = c
    return c


def sample_from_uniforms(law, u: np.ndarray) -> np.ndarray:
    """Vectorised ``law.sample``: the same inverse-cdf map applied to given uniforms."""
    u = np.asarray(u, dtype=float)
    if isinstance(law, GeometricLaw):
        if law.p0 >= 1.0:
            return np.ones(u.shape, dtype=np.int64)
        q = np.floor(np.log1p(-u) / math.log1p(-law.p0)).astype(np.int64) + 1
        return np.maximum(q, 1)
    cdf = np.asarray(_cached_cdf(law))
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1) + 1


def law_from_dict(d: Mapping) -> object:
    t = d["type"]
    if t == "geometric":
        return GeometricLaw(float(d["p0"]))
    if t == "truncated_geometric":
        return TruncatedGeometricLaw(float(d["p0"]), int(d["Q"]))
    if t == "market_mixture":
        return MarketSizeMixture(float(d["p0"]), int(d["Q"]), float(d["theta0"]),
                                 tuple(d.get("theta", ())), float(d.get("theta_inf", 0.0)))
    if t == "discrete":
        return DiscreteLaw(tuple(d["pmf"]))
    raise ConfigError(f"unknown law type {t!r}")


def pmf(law, q: int) -> float:
    return law.pmf(q)


def sample(law, rng) -> int:
    return law.sample(rng)


# --- regeneration ----------------------------------------------------------

QR_BUCKETS = ("(0,10)", "[10,20)", "[20,inf)")
DT_LO, DT_HI, DT_WIDTH = -6.0, 1.0, 0.1
N_DT_CELLS = int(round((DT_HI - DT_LO) / DT_WIDTH))
DEFAULT_P_FOLLOW = 0.5
DEFAULT_QE_P0 = 0.64
DEFAULT_DT_CELL = int(round((-3.0 - DT_LO) / DT_WIDTH))


def qr_bucket(contracts: int) -> int:
    if contracts < LOT_CONTRACTS:
        return 0
    if contracts < 2 * LOT_CONTRACTS:
        return 1
    return 2


def qr_bucket_lots(lots: int) -> int:
    return qr_bucket(contracts_of(lots))


def dt_cell(dt: float) -> int:
    x = (math.log10(max(dt, 1e-300)) - DT_LO) / DT_WIDTH
    return min(max(int(math.floor(x + 1e-9)), 0), N_DT_CELLS - 1)


def dt_cell_bounds(cell: int) -> Tuple[float, float]:
    lo = DT_LO + cell * DT_WIDTH
    return 10.0 ** lo, 10.0 ** (lo + DT_WIDTH)


def _key(*parts) -> str:
    return "|".join(p.value if hasattr(p, "value") else str(p) for p in parts)


@dataclass
class RegenerationTable:
    """Conditional laws of the establishing order after a limit was emptied.

    Keys are strings ``"M|2"`` for ``p_follow`` and ``"M|F|2"`` for
    ``qe_law``/``dt_law`` (removal kind, establish kind, q_r bucket).
    ``counts`` holds the number of observations behind each key.
    """

    p_follow: Dict[str, float] = field(default_factory=dict)
    qe_law: Dict[str, List[float]] = field(default_factory=dict)
    dt_law: Dict[str, List[float]] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for k, p in self.p_follow.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"p_follow[{k}]={p} outside [0, 1]")
        for name in ("qe_law", "dt_law"):
            for k, v in getattr(self, name).items():
                arr = np.asarray(v, dtype=float)
                if (arr < 0).any() or abs(arr.sum() - 1.0) > 1e-6:
                    raise ConfigError(f"{name}[{k}] is not a pmf")
        self._cdfs: Dict[Tuple[str, str], List[float]] = {}

    @property
    def empty(self) -> bool:
        return not self.p_follow

    def _count(self, key: str) -> float:
        return float(self.counts.get(key, 1))

    def follow_prob(self, o_r: RemovalKind, bucket: int) -> float:
        k = _key(o_r, bucket)
        if k in self.p_follow:
            return self.p_follow[k]
        rows = [(self.p_follow[_key(o_r, b)], self._count(_key(o_r, b)))
                for b in range(3) if _key(o_r, b) in self.p_follow]
        if rows:
            w = sum(c for _, c in rows)
            return sum(p * c for p, c in rows) / w
        return DEFAULT_P_FOLLOW

    def _marginal(self, table: Dict[str, List[float]], o_r, o_e, bucket: int) -> Optional[np.ndarray]:
        k = _key(o_r, o_e, bucket)
        if k in table:
            return np.asarray(table[k], dtype=float)
        rows = [(np.asarray(table[_key(o_r, o_e, b)], dtype=float), self._count(_key(o_r, o_e, b)))
                for b in range(3) if _key(o_r, o_e, b) in table]
        if not rows:
            return None
        n = max(len(r) for r, _ in rows)
        acc = np.zeros(n)
        for r, c in rows:
            acc[:len(r)] += c * r
        return acc / acc.sum()

    def qe_pmf(self, o_r: RemovalKind, o_e: EstablishKind, bucket: int, n: int) -> np.ndarray:
        """Distribution of the establishing size over ``1..n`` lots; mass
        beyond ``n`` is folded onto ``n``."""
        arr = self._marginal(self.qe_law, o_r, o_e, bucket)
        if arr is None:
            arr = GeometricLaw(DEFAULT_QE_P0).pmf_array(n)
            arr[-1] += max(0.0, 1.0 - arr.sum())
            return arr
        out = np.zeros(n)
        m = min(n, len(arr))
        out[:m] = arr[:m]
        out[n - 1] += arr[m:].sum()
        return out / out.sum()

    def dt_pmf(self, o_r: RemovalKind, o_e: EstablishKind, bucket: int) -> np.ndarray:
        arr = self._marginal(self.dt_law, o_r, o_e, bucket)
        if arr is None:
            pooled = [np.asarray(v, dtype=float) * self._count(k) for k, v in self.dt_law.items()]
            if pooled:
                arr = np.sum(pooled, axis=0)
                arr = arr / arr.sum()
            else:
                arr = np.zeros(N_DT_CELLS)
                arr[DEFAULT_DT_CELL] = 1.0
        return arr

    def _cdf(self, kind: str, o_r, o_e, bucket: int, n: int = 0) -> List[float]:
        key = (kind, _key(o_r, o_e, bucket, n))
        c = self._cdfs.get(key)
        if c is None:
            arr = self.qe_pmf(o_r, o_e, bucket, n) if kind == "qe" else self.dt_pmf(o_r, o_e, bucket)
            c = _cdf_list(arr)
            self._cdfs[key] = c
        return c

    def to_dict(self) -> dict:
        return {"p_follow": dict(self.p_follow), "qe_law": {k: list(v) for k, v in self.qe_law.items()},
                "dt_law": {k: list(v) for k, v in self.dt_law.items()}, "counts": dict(self.counts)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegenerationTable":
        return cls(dict(d.get("p_follow", {})), {k: list(v) for k, v in d.get("qe_law", {}).items()},
                   {k: list(v) for k, v in d.get("dt_law", {}).items()},
                   {k: int(v) for k, v in d.get("counts", {}).items()})


def sample_dt_in_cell(cell: int, u: float) -> float:
    lo = DT_LO + cell * DT_WIDTH
    return 10.0 ** (lo + u * DT_WIDTH)


def sample_establishment(table: RegenerationTable, o_r: RemovalKind, q_r: int, rng,
                         q_max: int = 50) -> EstablishEvent:
    """Draw (O^e, q^e, dt) given the removal kind and its size ``q_r`` in lots."""
    if table.empty:
        raise ConfigError("regeneration table has no entries")
    b = qr_bucket_lots(q_r)
    o_e = EstablishKind.FOLLOW if rng.random() < table.follow_prob(o_r, b) else EstablishKind.REVERT
    q_e = _invert(table._cdf("qe", o_r, o_e, b, q_max), rng.random()) + 1
    cell = _invert(table._cdf("dt", o_r, o_e, b), rng.random())
    return EstablishEvent(o_e, q_e, sample_dt_in_cell(cell, rng.random()))
