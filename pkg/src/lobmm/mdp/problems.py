"""Keep-or-cancel (one unit) and make-the-spread (pair) problems.

Values are in ticks. The one-unit problem is written for a buy order resting
at level ``j0`` with stop level ``J = j0 + D``; ``d`` is the distance from
``j0`` to the best ask. A sell order is the mirror image, and since the
kernel is the same on both sides it shares the buy table.

One-unit state groups:

* ``A``     d = 1, our bid is at the best: own queue ``(x, y)``, ask ``q``
* ``B[d]``  d >= 2, our bid rests ``d-1`` ticks under the best bid:
            best bid ``qb``, best ask ``qa``, frozen position ``y``
* ``WO``    the best ask was just emptied (d = 1 keyed by own queue,
            d >= 2 by ``qb, y``), waiting for the establishing order
* ``WW[d]`` d >= 2, the best bid was emptied
* ``FU/FD`` a follow has been decided, the new queues are being drawn
* ``EXEC``  filled (value ``D``), ``STOP`` best ask reached ``J`` (value 0)

Cancelling and buying at the best ask is worth ``D - d``; it is not offered
while the ask side is empty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .core import MdpError, MdpProblem, Solution, value_iterate
from .kernel import SideKernel

WAIT, CANCEL_MARKET, EXECUTED, STOPPED = 0, 1, 2, 3
ONE_UNIT_ACTIONS = ["wait", "cancel+market", "executed", "stopped"]
PAIR_WAIT, CANCEL_BOTH, FILLED, FORCED = 0, 1, 2, 3
PAIR_ACTIONS = ["wait", "cancel-both", "filled", "force-cancel"]


class Layout:
    def __init__(self):
        self.groups: Dict[str, Tuple[int, int]] = {}
        self.n = 0

    def add(self, name: str, size: int) -> int:
        self.groups[name] = (self.n, size)
        self.n += size
        return self.n - size

    def start(self, name: str) -> int:
        return self.groups[name][0]

    def has(self, name: str) -> bool:
        return name in self.groups


class _Coo:
    def __init__(self):
        self.r: List[np.ndarray] = []
        self.c: List[np.ndarray] = []
        self.v: List[np.ndarray] = []

    def add(self, r0: int, c0: int, M) -> None:
        M = sp.coo_matrix(M)
        self.r.append(M.row.astype(np.int64) + r0)
        self.c.append(M.col.astype(np.int64) + c0)
        self.v.append(M.data)

    def add1(self, r: int, c: int, v: float) -> None:
        self.r.append(np.array([r], dtype=np.int64))
        self.c.append(np.array([c], dtype=np.int64))
        self.v.append(np.array([v], dtype=float))

    def add_many(self, r, c, v) -> None:
        self.r.append(np.asarray(r, dtype=np.int64))
        self.c.append(np.asarray(c, dtype=np.int64))
        self.v.append(np.asarray(v, dtype=float))

    def csr(self, shape) -> sp.csr_matrix:
        if not self.r:
            return sp.csr_matrix(shape)
        M = sp.csr_matrix((np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))), shape=shape)
        M.sum_duplicates()
        return M


def _rows_normalized(R: sp.csr_matrix, total: np.ndarray) -> sp.csr_matrix:
    if (total <= 0).any():
        i = int(np.flatnonzero(total <= 0)[0])
        raise MdpError(f"no event can happen from state {i}: all rates vanish")
    return sp.diags(1.0 / total) @ R


@dataclass
class OneUnitModel:
    kernel: SideKernel
    D: int
    layout: Layout
    problem: MdpProblem
    solution: Optional[Solution] = None

    @property
    def V(self) -> np.ndarray:
        return self.solution.V

    # indices
    def idx_A(self, x: int, y: int, q: int) -> int:
        k = self.kernel
        return self.layout.start("A") + k.own_index(x, y) * k.Q + q - 1

    def idx_B(self, d: int, qb: int, qa: int, y: int) -> int:
        Q = self.kernel.Q
        return self.layout.start(f"B{d}") + ((qb - 1) * Q + qa - 1) * Q + y - 1

    def idx_WO1(self, x: int, y: int, key: int) -> int:
        k = self.kernel
        return self.layout.start("WO1") + k.own_index(x, y) * k.K + key

    def idx_WO(self, d: int, qb: int, y: int, key: int) -> int:
        k = self.kernel
        return self.layout.start(f"WO{d}") + ((qb - 1) * k.K + key) * k.Q + y - 1

    def idx_WW(self, d: int, qa: int, y: int, key: int) -> int:
        k = self.kernel
        return self.layout.start(f"WW{d}") + (key * k.Q + qa - 1) * k.Q + y - 1

    @property
    def idx_exec(self) -> int:
        return self.layout.start("EXEC")

    @property
    def idx_stop(self) -> int:
        return self.layout.start("STOP")

    def value(self, idx: int) -> float:
        return float(self.solution.V[idx])

    def decision(self, idx: int) -> str:
        return ONE_UNIT_ACTIONS[int(self.solution.policy[idx])]

    def terminal_table(self) -> np.ndarray:
        """``T[i, o]``: value once the opposite order of a pair has filled,
        our order being the own-queue state ``i`` at the best; ``o < Q`` means
        the filled side kept ``o+1`` lots, ``o >= Q`` that it emptied with
        regeneration key ``o-Q``."""
        k = self.kernel
        V = self.solution.V
        T = np.zeros((k.n_own, k.Q + k.K))
        a0 = self.layout.start("A")
        T[:, :k.Q] = V[a0:a0 + k.n_own * k.Q].reshape(k.n_own, k.Q)
        w0 = self.layout.start("WO1")
        T[:, k.Q:] = V[w0:w0 + k.n_own * k.K].reshape(k.n_own, k.K)
        return T

    def deep_table(self, d: int) -> Tuple[np.ndarray, np.ndarray]:
        """Values of ``B[d]`` as ``(qb, qa, y)`` and ``WO[d]`` as ``(qb, key, y)``."""
        k = self.kernel
        Q, K = k.Q, k.K
        V = self.solution.V
        b0 = self.layout.start(f"B{d}")
        w0 = self.layout.start(f"WO{d}")
        return V[b0:b0 + Q ** 3].reshape(Q, Q, Q), V[w0:w0 + Q * K * Q].reshape(Q, K, Q)


def build_one_unit(kernel: SideKernel, D: int) -> OneUnitModel:
    """Buy one lot resting at ``j0`` with stop ``J = j0 + D`` (``D >= 2``)."""
    if D < 2:
        raise MdpError(f"stop level must be at least 2 ticks above the order (got D={D})")
    k = kernel
    Q, K, n_own = k.Q, k.K, k.n_own
    L = Layout()
    L.add("A", n_own * Q)
    for d in range(2, D):
        L.add(f"B{d}", Q ** 3)
    L.add("WO1", n_own * K)
    for d in range(2, D):
        L.add(f"WO{d}", Q * K * Q)
        L.add(f"WW{d}", K * Q * Q)
    for d in range(1, D - 1):
        L.add(f"FU{d}", Q * K)
    for d in range(2, D):
        L.add(f"FD{d}", Q * K)
    n_cont = L.n
    L.add("EXEC", 1)
    L.add("STOP", 1)
    n = L.n
    ex, stop = L.start("EXEC"), L.start("STOP")
    I_Q = sp.identity(Q, format="csr")
    I_own = sp.identity(n_own, format="csr")
    coo = _Coo()

    # A: both sides at the best
    a0 = L.start("A")
    tot_A = np.kron(k.own_total, np.ones(Q)) + np.kron(np.ones(n_own), k.free_total)
    inv = sp.diags(1.0 / tot_A)
    coo.add(a0, a0, inv @ (sp.kron(k.own_R, I_Q) + sp.kron(I_own, k.free_R)))
    coo.add(a0, L.start("WO1"), inv @ sp.kron(I_own, sp.csr_matrix(k.free_empty)))
    exec_rate = np.kron(k.own_exec.sum(axis=1), np.ones(Q)) / tot_A
    nz = np.flatnonzero(exec_rate)
    coo.add_many(a0 + nz, np.full(nz.size, ex), exec_rate[nz])

    # B[d]: our bid deep, both best queues free
    ft = k.free_total
    for d in range(2, D):
        b0 = L.start(f"B{d}")
        tot = np.kron(np.kron(ft, np.ones(Q)), np.ones(Q)) + np.kron(np.kron(np.ones(Q), ft), np.ones(Q))
        inv = sp.diags(1.0 / tot)
        I_QQ = sp.identity(Q * Q, format="csr")
        coo.add(b0, b0, inv @ (sp.kron(k.free_R, I_QQ) + sp.kron(sp.kron(I_Q, k.free_R), I_Q)))
        coo.add(b0, L.start(f"WW{d}"), inv @ sp.kron(sp.csr_matrix(k.free_empty), I_QQ))
        coo.add(b0, L.start(f"WO{d}"), inv @ sp.kron(sp.kron(I_Q, sp.csr_matrix(k.free_empty)), I_Q))

    qeF, qeR = k.qe_pmf[:, 0, :], k.qe_pmf[:, 1, :]
    qs = np.arange(1, Q + 1)

    # WO1: ask emptied while we sit at the best bid
    w0 = L.start("WO1")
    for i in range(n_own):
        y = k.own_y[i]
        for key in range(K):
            r = w0 + i * K + key
            pf = k.p_follow[key]
            coo.add_many(np.full(Q, r), a0 + i * Q + qs - 1, (1 - pf) * qeR[key])
            tgt = stop if D == 2 else L.start("FU1") + (y - 1) * K + key
            coo.add1(r, tgt, pf)

    for d in range(2, D):
        b0 = L.start(f"B{d}")
        wo, ww = L.start(f"WO{d}"), L.start(f"WW{d}")
        for qb in range(1, Q + 1):
            for key in range(K):
                pf = k.p_follow[key]
                for y in range(1, Q + 1):
                    r = wo + ((qb - 1) * K + key) * Q + y - 1
                    coo.add_many(np.full(Q, r), b0 + ((qb - 1) * Q + qs - 1) * Q + y - 1, (1 - pf) * qeR[key])
                    tgt = stop if d + 1 == D else L.start(f"FU{d}") + (y - 1) * K + key
                    coo.add1(r, tgt, pf)
        for key in range(K):
            pf = k.p_follow[key]
            for qa in range(1, Q + 1):
                for y in range(1, Q + 1):
                    r = ww + (key * Q + qa - 1) * Q + y - 1
                    coo.add_many(np.full(Q, r), b0 + ((qs - 1) * Q + qa - 1) * Q + y - 1, (1 - pf) * qeR[key])
                    coo.add1(r, L.start(f"FD{d}") + (y - 1) * K + key, pf)

    # follow intermediates: draw the establishing size and the revealed queue
    hid = k.hidden
    for d in range(1, D - 1):
        fu = L.start(f"FU{d}")
        bn = L.start(f"B{d + 1}")
        for y in range(1, Q + 1):
            for key in range(K):
                r = fu + (y - 1) * K + key
                # new best bid = establishing order, new best ask = revealed
                w = np.outer(qeF[key], hid)
                cols = bn + ((qs[:, None] - 1) * Q + (qs[None, :] - 1)) * Q + y - 1
                coo.add_many(np.full(Q * Q, r), cols.ravel(), w.ravel())
    for d in range(2, D):
        fd = L.start(f"FD{d}")
        for y in range(1, Q + 1):
            for key in range(K):
                r = fd + (y - 1) * K + key
                w = np.outer(hid, qeF[key])  # (revealed bid h, new ask q_e)
                if d - 1 == 1:
                    own = np.array([k.own_index(h, min(y, h)) for h in qs])
                    cols = a0 + own[:, None] * Q + (qs[None, :] - 1)
                else:
                    cols = L.start(f"B{d - 1}") + ((qs[:, None] - 1) * Q + (qs[None, :] - 1)) * Q + y - 1
                coo.add_many(np.full(Q * Q, r), cols.ravel(), w.ravel())

    P = coo.csr((n_cont, n))
    v_T = np.full(n, -np.inf)
    t_action = np.full(n, -1)
    v_T[a0:a0 + n_own * Q] = D - 1
    t_action[a0:a0 + n_own * Q] = CANCEL_MARKET
    for d in range(2, D):
        for g in (f"B{d}", f"WW{d}"):
            s0, sz = L.groups[g]
            v_T[s0:s0 + sz] = D - d
            t_action[s0:s0 + sz] = CANCEL_MARKET
    v_T[ex], t_action[ex] = D, EXECUTED
    v_T[stop], t_action[stop] = 0.0, STOPPED
    prob = MdpProblem(n, P, np.arange(n_cont), np.full(n_cont, WAIT), np.zeros(n_cont), v_T, t_action,
                      ONE_UNIT_ACTIONS, {"kind": "one-unit", "D": D, "Q": Q, "K": K,
                                         "groups": {g: list(v) for g, v in L.groups.items()}})
    return OneUnitModel(kernel, D, L, prob)


def solve_one_unit(kernel: SideKernel, D: int, tol: float = 1e-9, **kw) -> OneUnitModel:
    m = build_one_unit(kernel, D)
    m.solution = value_iterate(m.problem, tol, **kw)
    return m


# --- pair ---------------------------------------------------------------------------------

@dataclass
class PairModel:
    kernel: SideKernel
    S: int
    layout: Layout
    problem: MdpProblem
    one_unit: OneUnitModel
    solution: Optional[Solution] = None

    def idx(self, xb: int, xa: int, yb: int, ya: int) -> int:
        k = self.kernel
        return self.layout.start("P") + k.own_index(xb, yb) * k.n_own + k.own_index(xa, ya)

    def value(self, xb: int, xa: int, yb: int, ya: int) -> float:
        """Pair value in ticks (the shift by ``S`` removed)."""
        return float(self.solution.V[self.idx(xb, xa, yb, ya)]) - self.S

    def decision(self, xb: int, xa: int, yb: int, ya: int) -> str:
        return PAIR_ACTIONS[int(self.solution.policy[self.idx(xb, xa, yb, ya)])]

    def value_matrix(self) -> np.ndarray:
        """Shifted-back values as an ``(n_own, n_own)`` matrix (bid, ask)."""
        k = self.kernel
        p0 = self.layout.start("P")
        return self.solution.V[p0:p0 + k.n_own ** 2].reshape(k.n_own, k.n_own) - self.S


def build_pair(kernel: SideKernel, S: int, one_unit: OneUnitModel) -> PairModel:
    """Bid at the best bid and ask at the best ask; cancel both is worth 0.

    Values are shifted by ``S`` so they stay nonnegative: a fill on one side
    ends the pair with the one-unit value of the remaining order, which is the
    pair's cash minus the stop distance ``S``.
    """
    k = kernel
    if one_unit.solution is None:
        raise MdpError("one-unit table must be solved before building the pair")
    if one_unit.D != S + 1:
        raise MdpError(f"one-unit table has D={one_unit.D}, the pair needs D={S + 1}")
    Q, K, n_own = k.Q, k.K, k.n_own
    n_out = Q + K
    L = Layout()
    L.add("P", n_own * n_own)
    n_cont = L.n
    L.add("TB", n_out * n_own)  # bid filled: (outcome, ask state)
    L.add("TA", n_own * n_out)  # ask filled: (bid state, outcome)
    n = L.n
    I_own = sp.identity(n_own, format="csr")
    tot = np.kron(k.own_total, np.ones(n_own)) + np.kron(np.ones(n_own), k.own_total)
    inv = sp.diags(1.0 / tot)
    coo = _Coo()
    coo.add(0, 0, inv @ (sp.kron(k.own_R, I_own) + sp.kron(I_own, k.own_R)))
    coo.add(0, L.start("TB"), inv @ sp.kron(sp.csr_matrix(k.own_exec), I_own))
    coo.add(0, L.start("TA"), inv @ sp.kron(I_own, sp.csr_matrix(k.own_exec)))
    P = coo.csr((n_cont, n))

    T = one_unit.terminal_table()  # (n_own, n_out)
    v_T = np.empty(n)
    t_action = np.empty(n, dtype=np.int64)
    v_T[:n_cont] = S
    t_action[:n_cont] = CANCEL_BOTH
    tb = L.start("TB")
    v_T[tb:tb + n_out * n_own] = T.T.ravel()
    ta = L.start("TA")
    v_T[ta:ta + n_own * n_out] = T.ravel()
    t_action[tb:] = FILLED
    prob = MdpProblem(n, P, np.arange(n_cont), np.full(n_cont, PAIR_WAIT), np.zeros(n_cont), v_T, t_action,
                      PAIR_ACTIONS, {"kind": "pair", "S": S, "Q": Q, "K": K, "shift": S,
                                     "groups": {g: list(v) for g, v in L.groups.items()}})
    return PairModel(kernel, S, L, prob, one_unit)


def solve_pair(kernel: SideKernel, S: int = 2, tol: float = 1e-9, one_unit: Optional[OneUnitModel] = None,
               **kw) -> PairModel:
    one_unit = one_unit or solve_one_unit(kernel, S + 1, tol, **kw)
    m = build_pair(kernel, S, one_unit)
    m.solution = value_iterate(m.problem, tol, **kw)
    return m
