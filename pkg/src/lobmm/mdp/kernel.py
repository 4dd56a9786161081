"""Per-side transition rates of the jump chain, shared by all problem builders.

A *free* queue is a best limit without our order; an *own* queue ``(x, y)``
holds ``x`` lots of which our single lot is ``y``-th in line (``y = x`` at the
tail). Cancellations only hit other participants' lots: a cancel of ``c`` lots
removes ``min(c, x-1)`` others, each equally likely, so the number removed
ahead of us is hypergeometric. Markets consume the queue front first and
execute us as soon as they reach position ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.stats import hypergeom

from ..order_flow import qr_bucket_lots
from ..lob_core import EstablishKind, RemovalKind

R_KINDS = ("M", "C")


@dataclass
class SideKernel:
    Q: int
    lam_L: np.ndarray  # index 1..Q
    lam_C: np.ndarray
    lam_M: np.ndarray
    limit_pmf: List[np.ndarray]  # [q] -> pmf over 1..Q-q (empty at q=Q)
    cancel_pmf: List[np.ndarray]  # [q] -> pmf over 1..q
    market_pmf: List[np.ndarray]  # [q] -> pmf over 1..q
    keys: List[Tuple[str, int]]  # regeneration keys (removal kind, q_r bucket); ('*', 0) if side-only
    p_follow: np.ndarray  # per key
    qe_pmf: np.ndarray  # (K, 2, Q): establish size given key and F(0)/R(1)
    hidden: np.ndarray  # (Q,) revealed queue law

    def __post_init__(self):
        self.K = len(self.keys)
        self._key_index = {k: i for i, k in enumerate(self.keys)}
        self._build_free()
        self._build_own()

    # --- construction ------------------------------------------------------

    @classmethod
    def from_spec(cls, spec, Q: Optional[int] = None) -> "SideKernel":
        """Kernel of a simulator ``ModelSpec`` (variants 0, I or II)."""
        Q = Q or spec.q_max
        unit = spec.variant == "0"
        limit, cancel, market = [np.zeros(0)], [np.zeros(0)], [np.zeros(0)]
        for q in range(1, Q + 1):
            if unit:
                limit.append(np.eye(1, Q - q, 0).ravel() if q < Q else np.zeros(0))
                cancel.append(np.eye(1, q, 0).ravel())
                market.append(np.eye(1, q, 0).ravel())
                continue
            cap = Q - q
            if cap > 0:
                pm = spec.limit_law(q).pmf_array(cap).copy()
                pm[-1] += max(0.0, 1.0 - pm.sum())
            else:
                pm = np.zeros(0)
            limit.append(pm)
            cancel.append(spec.cancel_law(min(q, spec.q_max)).pmf_array(q) if q <= spec.q_max else None)
            market.append(spec.market_law(min(q, spec.q_max)).pmf_array(q))
        lam = lambda a: np.concatenate([[0.0], np.asarray(a[1:Q + 1], dtype=float)])
        lam_L = lam(spec.lam_L)
        lam_L[Q] = 0.0
        hidden = np.asarray(spec.hidden_law.pmf_array(Q), dtype=float)
        hidden[-1] += max(0.0, 1.0 - hidden.sum())
        hidden /= hidden.sum()

        if spec.variant == "II":
            keys = [(o, b) for o in R_KINDS for b in range(3)]
            pf = np.array([spec.regen.follow_prob(RemovalKind(o), b) for o, b in keys])
            qe = np.zeros((len(keys), 2, Q))
            for i, (o, b) in enumerate(keys):
                for j, e in enumerate((EstablishKind.FOLLOW, EstablishKind.REVERT)):
                    qe[i, j] = spec.regen.qe_pmf(RemovalKind(o), e, b, Q)
        else:
            keys = [("*", 0)]
            pf = np.array([spec.side_regen.p_follow])
            if unit:
                row = np.eye(1, Q, 0).ravel()
            else:
                row = spec.limit_law(1).pmf_array(Q).copy()
                row[-1] += max(0.0, 1.0 - row.sum())
            qe = np.stack([np.stack([row, row])])
        return cls(Q, lam_L, lam(spec.lam_C), lam(spec.lam_M), limit, cancel, market, keys, pf, qe, hidden)

    def key_of(self, o_r: str, q_r: int) -> int:
        if self.K == 1 and self.keys[0][0] == "*":
            return 0
        return self._key_index[(o_r, qr_bucket_lots(q_r))]

    def _build_free(self) -> None:
        """Free-queue rates ``q -> q'`` and emptying rates ``q -> key``."""
        Q, K = self.Q, self.K
        rows, cols, vals = [], [], []
        empty = np.zeros((Q, K))
        for q in range(1, Q + 1):
            pm = self.limit_pmf[q]
            for s in np.flatnonzero(pm):
                rows.append(q - 1); cols.append(q + s); vals.append(self.lam_L[q] * pm[s])
            for kind, lam, pm in (("C", self.lam_C[q], self.cancel_pmf[q]), ("M", self.lam_M[q], self.market_pmf[q])):
                if lam <= 0:
                    continue
                for s in np.flatnonzero(pm):
                    size = s + 1
                    if size >= q:
                        empty[q - 1, self.key_of(kind, q)] += lam * pm[s:].sum()
                        break
                    rows.append(q - 1); cols.append(q - size - 1); vals.append(lam * pm[s])
        R = sp.csr_matrix((vals, (rows, cols)), shape=(Q, Q))
        R.sum_duplicates()
        self.free_R = R
        self.free_empty = empty
        self.free_total = np.asarray(R.sum(axis=1)).ravel() + empty.sum(axis=1)

    def own_states(self) -> List[Tuple[int, int]]:
        return [(x, y) for x in range(1, self.Q + 1) for y in range(1, x + 1)]

    def own_index(self, x: int, y: int) -> int:
        return (x - 1) * x // 2 + (y - 1)

    def _build_own(self) -> None:
        """Own-queue rates and execution outcomes.

        ``own_exec[i, o]``: rate of being filled from state ``i`` while the
        queue left behind is ``o+1`` lots (``o < Q``) or empties with
        regeneration key ``o - Q``.
        """
        Q, K = self.Q, self.K
        states = self.own_states()
        n = len(states)
        rows, cols, vals = [], [], []
        ex = np.zeros((n, Q + K))
        hg_cache: Dict[Tuple[int, int, int], np.ndarray] = {}
        for i, (x, y) in enumerate(states):
            pm = self.limit_pmf[x]
            for s in np.flatnonzero(pm):
                rows.append(i); cols.append(self.own_index(x + s + 1, y)); vals.append(self.lam_L[x] * pm[s])
            if x >= 2 and self.lam_C[x] > 0:
                pm = self.cancel_pmf[x]
                eff = np.zeros(x)  # eff[c] for c in 1..x-1
                for s in np.flatnonzero(pm):
                    eff[min(s + 1, x - 1)] += pm[s]
                for c in np.flatnonzero(eff):
                    key = (x - 1, y - 1, c)
                    h = hg_cache.get(key)
                    if h is None:
                        k = np.arange(0, c + 1)
                        h = hypergeom.pmf(k, x - 1, y - 1, c)
                        h[~np.isfinite(h)] = 0.0
                        h /= h.sum()
                        hg_cache[key] = h
                    for k in np.flatnonzero(h):
                        rows.append(i); cols.append(self.own_index(x - c, y - k))
                        vals.append(self.lam_C[x] * eff[c] * h[k])
            if self.lam_M[x] > 0:
                pm = self.market_pmf[x]
                for s in np.flatnonzero(pm):
                    m = s + 1
                    rate = self.lam_M[x] * pm[s]
                    if m < y:
                        rows.append(i); cols.append(self.own_index(x - m, y - m)); vals.append(rate)
                    elif m < x:
                        ex[i, x - m - 1] += rate
                    else:
                        ex[i, Q + self.key_of("M", m)] += rate
        R = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        R.sum_duplicates()
        self.own_R = R
        self.own_exec = ex
        self.own_total = np.asarray(R.sum(axis=1)).ravel() + ex.sum(axis=1)
        self.own_x = np.array([x for x, _ in states])
        self.own_y = np.array([y for _, y in states])
        self.n_own = n


def unit_kernel(Q: int, lam_L, lam_C, lam_M, p_follow: float, hidden: Sequence[float]) -> SideKernel:
    """Unit-size kernel from raw rate arrays over bins ``1..Q``."""
    lam = lambda a: np.concatenate([[0.0], np.asarray(a, dtype=float)])
    lam_L = lam(lam_L)
    lam_L[Q] = 0.0
    limit = [np.zeros(0)] + [np.eye(1, Q - q, 0).ravel() if q < Q else np.zeros(0) for q in range(1, Q + 1)]
    one = [np.zeros(0)] + [np.eye(1, q, 0).ravel() for q in range(1, Q + 1)]
    row = np.eye(1, Q, 0).ravel()
    h = np.asarray(hidden, dtype=float)
    return SideKernel(Q, lam_L, lam(lam_C), lam(lam_M), limit, one, list(one), [("*", 0)],
                      np.array([p_follow]), np.stack([np.stack([row, row])]), h / h.sum())
