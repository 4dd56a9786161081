"""Make-the-spread with cancel-and-resubmit across price levels.

Each order is either at the best (offset 0, own queue ``(x, y)``) or rests
``o`` ticks behind the best on its side (offset ``o`` in ``1..G``) with the
best queue ``q`` free and its position ``y`` frozen. Offsets move with the
price; an order pushed beyond ``G`` forces both orders out.

Resubmitting moves orders to other offsets at the tail and takes effect
with the next book event, so orders cannot hop between levels in zero time.
An order placed behind the best gets a position drawn from the revealed-queue
law plus one.
With ``G = 0`` there is nowhere else to go and the problem is the plain pair.

States are enumerated explicitly, so this is meant for small ``Q``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .core import MdpError, MdpProblem, Solution, value_iterate
from .kernel import SideKernel
from .problems import CANCEL_BOTH, FILLED, FORCED, PAIR_WAIT, OneUnitModel, solve_one_unit

RESUBMIT0 = 4
KEEP = -1

Comp = Tuple  # ("own", x, y) or ("deep", o, q, y)


def _resubmit_name(kb: int, ka: int) -> str:
    f = lambda k: "keep" if k == KEEP else str(k)
    return f"resubmit({f(kb)},{f(ka)})"


@dataclass
class ExtendedPairModel:
    kernel: SideKernel
    S: int
    G: int
    index: Dict[tuple, int]
    problem: MdpProblem
    one_units: Dict[int, OneUnitModel]
    solution: Optional[Solution] = None

    def idx(self, cb: Comp, ca: Comp) -> int:
        return self.index[("P", cb, ca)]

    def value(self, cb: Comp, ca: Comp) -> float:
        return float(self.solution.V[self.idx(cb, ca)]) - self.S

    def decision(self, cb: Comp, ca: Comp) -> str:
        return self.problem.action_names[int(self.solution.policy[self.idx(cb, ca)])]

    def pair_states(self) -> List[Tuple[Comp, Comp]]:
        return [(k[1], k[2]) for k in self.index if k[0] == "P"]


def _components(Q: int, G: int) -> List[Comp]:
    comps: List[Comp] = [("own", x, y) for x in range(1, Q + 1) for y in range(1, x + 1)]
    comps += [("deep", o, q, y) for o in range(1, G + 1) for q in range(1, Q + 1) for y in range(1, Q + 1)]
    return comps


def build_pair_extended(kernel: SideKernel, S: int, G: int,
                        one_units: Optional[Dict[int, OneUnitModel]] = None, tol: float = 1e-9) -> ExtendedPairModel:
    """Pair problem with resubmission to offsets ``0..G`` on each side."""
    k = kernel
    Q, K = k.Q, k.K
    if G < 0:
        raise MdpError("G must be >= 0")
    one_units = dict(one_units or {})
    for D in range(S + 1, S + 2 + G):
        if D not in one_units:
            one_units[D] = solve_one_unit(k, D, tol, validate=False)
        if one_units[D].solution is None:
            raise MdpError(f"one-unit table for D={D} is not solved")

    comps = _components(Q, G)
    index: Dict[tuple, int] = {}
    for cb in comps:
        for ca in comps:
            index[("P", cb, ca)] = len(index)
    n_pair = len(index)
    deep_parts = [(o, y) for o in range(1, G + 1) for y in range(1, Q + 1)]
    for side in "BA":
        for key in range(K):
            for part in deep_parts:
                for other in comps:
                    index[("W", side, key, part, other)] = len(index)

    terminals: Dict[tuple, float] = {}

    def term(tag: tuple, value: float) -> int:
        key = ("T",) + tag
        if key not in index:
            index[key] = len(index)
            terminals[key] = value
        return index[key]

    def fill_value(o: int, other: Comp) -> float:
        """Value once one side filled with outcome ``o`` for the other order."""
        if other[0] == "own":
            T = one_units[S + 1].terminal_table()
            return float(T[k.own_index(other[1], other[2]), o])
        _, off, q, y = other
        D = S + 1 + off
        d = 1 + off
        B, W = one_units[D].deep_table(d)
        if o < Q:
            return float(B[q - 1, o, y - 1])
        return float(W[q - 1, o - Q, y - 1])

    def fill_state(o: int, other: Comp) -> int:
        return term(("fill", o, other), fill_value(o, other))

    forced = term(("forced",), float(S))
    hid = k.hidden
    qeF, qeR = k.qe_pmf[:, 0, :], k.qe_pmf[:, 1, :]

    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    choice_state: List[int] = []
    choice_action: List[int] = []
    action_names = ["wait", "cancel-both", "filled", "force-cancel"]
    combo_ids: Dict[Tuple[int, int], int] = {}

    def add_choice(s: int, action: int, dist: Dict[int, float]) -> None:
        c = len(choice_state)
        choice_state.append(s)
        choice_action.append(action)
        for j, p in dist.items():
            if p > 0:
                rows.append(c)
                cols.append(j)
                vals.append(p)

    def side_moves(c: Comp) -> Tuple[List[Tuple[float, object]], float]:
        """Outgoing rates of one side: (rate, outcome) with outcome a new
        component, ("fill", o) or ("empty", key); plus the total."""
        out: List[Tuple[float, object]] = []
        if c[0] == "own":
            i = k.own_index(c[1], c[2])
            R = k.own_R
            for p in range(R.indptr[i], R.indptr[i + 1]):
                j = R.indices[p]
                out.append((R.data[p], ("own", int(k.own_x[j]), int(k.own_y[j]))))
            for o in np.flatnonzero(k.own_exec[i]):
                out.append((k.own_exec[i, o], ("fill", int(o))))
            return out, float(k.own_total[i])
        _, off, q, y = c
        R = k.free_R
        for p in range(R.indptr[q - 1], R.indptr[q]):
            out.append((R.data[p], ("deep", off, int(R.indices[p]) + 1, y)))
        for key in np.flatnonzero(k.free_empty[q - 1]):
            out.append((k.free_empty[q - 1, key], ("empty", int(key))))
        return out, float(k.free_total[q - 1])

    move_cache: Dict[Comp, Tuple[List, float]] = {}

    def moves(c: Comp):
        if c not in move_cache:
            move_cache[c] = side_moves(c)
        return move_cache[c]

    def pushed_back(c: Comp, q_best: int) -> Optional[Comp]:
        """The price moved away from this order: one more tick behind a new
        best of ``q_best`` lots (None when beyond the grid)."""
        if c[0] == "own":
            off, y = 1, c[2]
        else:
            off, y = c[1] + 1, c[3]
        if off > G:
            return None
        return ("deep", off, q_best, y)

    def pulled_in(off: int, y: int, h: int) -> Comp:
        if off == 1:
            return ("own", h, min(y, h))
        return ("deep", off - 1, h, y)

    def tail_dist(c: Comp, target: int) -> Optional[Dict[Comp, float]]:
        if c[0] == "own":
            if c[1] == 1:
                return None  # leaving would empty the best
            q_free = c[1] - 1
        else:
            q_free = c[2]
        if target == 0:
            x = min(q_free + 1, Q)
            return {("own", x, x): 1.0}
        out: Dict[Comp, float] = {}
        for h in range(1, Q + 1):
            y = min(h + 1, Q)
            key = ("deep", target, q_free, y)
            out[key] = out.get(key, 0.0) + hid[h - 1]
        return out

    def offset(c: Comp) -> int:
        return 0 if c[0] == "own" else c[1]

    # pair states: waiting rows first, resubmissions mix them
    wait_rows: Dict[int, Dict[int, float]] = {}
    for cb in comps:
        mb, tb = moves(cb)
        for ca in comps:
            s = index[("P", cb, ca)]
            ma, ta = moves(ca)
            tot = tb + ta
            if tot <= 0:
                raise MdpError(f"no event can happen from pair state {cb}, {ca}")
            dist: Dict[int, float] = {}

            def put(j: int, p: float) -> None:
                dist[j] = dist.get(j, 0.0) + p

            for rate, out in mb:
                p = rate / tot
                if out[0] == "fill":
                    put(fill_state(out[1], ca), p)
                elif out[0] == "empty":
                    put(index[("W", "B", out[1], (cb[1], cb[3]), ca)], p)
                else:
                    put(index[("P", out, ca)], p)
            for rate, out in ma:
                p = rate / tot
                if out[0] == "fill":
                    put(fill_state(out[1], cb), p)
                elif out[0] == "empty":
                    put(index[("W", "A", out[1], (ca[1], ca[3]), cb)], p)
                else:
                    put(index[("P", cb, out)], p)
            wait_rows[s] = dist

    for cb in comps:
        for ca in comps:
            s = index[("P", cb, ca)]
            add_choice(s, PAIR_WAIT, wait_rows[s])
            for kb, ka in itertools.product([KEEP] + list(range(G + 1)), repeat=2):
                if (kb == KEEP or kb == offset(cb)) and (ka == KEEP or ka == offset(ca)):
                    continue
                if kb == offset(cb) or ka == offset(ca):
                    continue  # staying put is spelled "keep"
                db = {cb: 1.0} if kb == KEEP else tail_dist(cb, kb)
                da = {ca: 1.0} if ka == KEEP else tail_dist(ca, ka)
                if db is None or da is None:
                    continue
                if (kb, ka) not in combo_ids:
                    combo_ids[(kb, ka)] = RESUBMIT0 + len(combo_ids)
                    action_names.append(_resubmit_name(kb, ka))
                # the new orders then wait for the next book event
                rd: Dict[int, float] = {}
                for nb, pb in db.items():
                    for na, pa in da.items():
                        for j, p in wait_rows[index[("P", nb, na)]].items():
                            rd[j] = rd.get(j, 0.0) + pb * pa * p
                add_choice(s, combo_ids[(kb, ka)], rd)

    # awaiting states: the best on ``side`` emptied over our deep order
    for side in "BA":
        for key in range(K):
            pf = k.p_follow[key]
            for off, y in deep_parts:
                for other in comps:
                    s = index[("W", side, key, (off, y), other)]
                    dist = {}

                    def put(j: int, p: float) -> None:
                        dist[j] = dist.get(j, 0.0) + p

                    for q in range(1, Q + 1):
                        p = (1 - pf) * qeR[key, q - 1]
                        if p > 0:
                            mine = ("deep", off, q, y)
                            put(index[("P", mine, other) if side == "B" else ("P", other, mine)], p)
                    for qe in range(1, Q + 1):
                        pe = pf * qeF[key, qe - 1]
                        if pe <= 0:
                            continue
                        other2 = pushed_back(other, qe)
                        for h in range(1, Q + 1):
                            p = pe * hid[h - 1]
                            if p <= 0:
                                continue
                            if other2 is None:
                                put(forced, p)
                                continue
                            mine = pulled_in(off, y, h)
                            put(index[("P", mine, other2) if side == "B" else ("P", other2, mine)], p)
                    add_choice(s, PAIR_WAIT, dist)

    n = len(index)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(len(choice_state), n))
    P.sum_duplicates()
    v_T = np.full(n, -np.inf)
    t_action = np.full(n, -1)
    v_T[:n_pair] = S
    t_action[:n_pair] = CANCEL_BOTH
    for key, v in terminals.items():
        i = index[key]
        v_T[i] = v
        t_action[i] = FORCED if key[1] == "forced" else FILLED
    prob = MdpProblem(n, P, np.array(choice_state), np.array(choice_action), np.zeros(len(choice_state)), v_T,
                      t_action, action_names, {"kind": "pair-ext", "S": S, "G": G, "Q": Q, "K": K, "shift": S})
    return ExtendedPairModel(k, S, G, index, prob, one_units)


def solve_pair_extended(kernel: SideKernel, S: int = 1, G: int = 1, tol: float = 1e-9,
                        one_units: Optional[Dict[int, OneUnitModel]] = None, **kw) -> ExtendedPairModel:
    m = build_pair_extended(kernel, S, G, one_units, tol)
    m.solution = value_iterate(m.problem, tol, **kw)
    return m
