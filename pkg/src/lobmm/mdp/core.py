"""Finite MDPs with continuation and termination actions, solved by value
iteration from zero."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12
MAX_SWEEPS = 10**6


class MdpError(Exception):
    pass


class NonConvergenceError(MdpError):
    def __init__(self, sweeps: int, residual: float):
        super().__init__(f"value iteration stopped after {sweeps} sweeps with residual {residual:.3e}")
        self.sweeps = sweeps
        self.residual = residual


@dataclass
class MdpProblem:
    """States ``0..n-1``; continuation choices are rows of ``P``.

    ``choice_state[c]`` is the state a choice belongs to (non-decreasing),
    ``choice_action[c]`` its action id, ``v_C[c]`` its immediate value.
    ``v_T[s]`` is the best termination value at ``s`` (``-inf`` when no
    termination is available) and ``t_action[s]`` the matching action id.
    """

    n_states: int
    P: sp.csr_matrix
    choice_state: np.ndarray
    choice_action: np.ndarray
    v_C: np.ndarray
    v_T: np.ndarray
    t_action: np.ndarray
    action_names: Sequence[str] = ()
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.P = sp.csr_matrix(self.P)
        self.choice_state = np.asarray(self.choice_state, dtype=np.int64)
        self.choice_action = np.asarray(self.choice_action, dtype=np.int64)
        self.v_C = np.asarray(self.v_C, dtype=float)
        self.v_T = np.asarray(self.v_T, dtype=float)
        self.t_action = np.asarray(self.t_action, dtype=np.int64)

    @property
    def n_choices(self) -> int:
        return len(self.choice_state)

    def validate(self, check_termination: bool = True) -> None:
        n, m = self.n_states, self.n_choices
        if self.P.shape != (m, n):
            raise MdpError(f"kernel shape {self.P.shape} != ({m}, {n})")
        if len(self.v_C) != m or len(self.choice_action) != m:
            raise MdpError("choice arrays disagree in length")
        if len(self.v_T) != n or len(self.t_action) != n:
            raise MdpError("termination arrays must have one entry per state")
        if m and (np.diff(self.choice_state) < 0).any():
            raise MdpError("choices must be grouped by state in increasing order")
        if m and (self.choice_state.min() < 0 or self.choice_state.max() >= n):
            raise MdpError("choice refers to an unknown state")
        if self.P.nnz and self.P.data.min() < 0:
            raise MdpError("negative transition probability")
        sums = np.asarray(self.P.sum(axis=1)).ravel()
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            c = bad[0]
            raise MdpError(f"kernel row of state {self.choice_state[c]} (action {self.choice_action[c]}) "
                           f"sums to {sums[c]!r}")
        if (self.v_C < 0).any() or (np.isfinite(self.v_T) & (self.v_T < 0)).any():
            raise MdpError("values must be nonnegative")
        has_c = np.zeros(n, dtype=bool)
        has_c[self.choice_state] = True
        has_t = np.isfinite(self.v_T)
        if not (has_c | has_t).all():
            s = int(np.flatnonzero(~(has_c | has_t))[0])
            raise MdpError(f"state {s} has no available action")
        if check_termination:
            self._check_termination(has_c)

    def _check_termination(self, has_c: np.ndarray) -> None:
        """Every state must reach a state without continuation."""
        n = self.n_states
        coo = self.P.tocoo()
        keep = coo.data > 0
        adj = sp.csr_matrix((np.ones(int(keep.sum())), (self.choice_state[coo.row[keep]], coo.col[keep])),
                            shape=(n, n))
        reached = ~has_c
        if not reached.any():
            raise MdpError("no state forces termination")
        while True:
            new = reached | (adj @ reached.astype(float) > 0)
            if (new == reached).all():
                break
            reached = new
        if not reached.all():
            s = int(np.flatnonzero(~reached)[0])
            raise MdpError(f"state {s} cannot reach a forced termination")


@dataclass
class Solution:
    V: np.ndarray
    policy: np.ndarray  # action id per state
    terminate: np.ndarray  # bool per state
    sweeps: int
    residual: float
    increments: List[float]


class _Backup:
    """Bellman backup with a precomputed segment layout for speed."""

    def __init__(self, prob: MdpProblem):
        self.p = prob
        cs = prob.choice_state
        n = prob.n_states
        self.states_with = np.unique(cs)
        self.starts = np.searchsorted(cs, self.states_with)
        self.PT = prob.P
        self.n = n

    def cont(self, V: np.ndarray) -> np.ndarray:
        q = self.p.v_C + self.PT @ V
        out = np.full(self.n, -np.inf)
        if q.size:
            out[self.states_with] = np.maximum.reduceat(q, self.starts)
        return out, q

    def __call__(self, V: np.ndarray) -> np.ndarray:
        c, _ = self.cont(V)
        return np.maximum(c, self.p.v_T)


def value_iterate(prob: MdpProblem, tol: float = 1e-9, max_sweeps: int = MAX_SWEEPS,
                  V0: Optional[np.ndarray] = None, validate: bool = True,
                  progress_every: int = 0) -> Solution:
    """Jacobi sweeps ``V <- max(max_C v_C + P V, max_T v_T)`` from ``V0 = 0``
    until the sup-norm increment is at most ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if validate:
        prob.validate()
    backup = _Backup(prob)
    V = np.zeros(prob.n_states) if V0 is None else np.asarray(V0, dtype=float).copy()
    increments = []
    sweeps = 0
    while True:
        Vn = backup(V)
        sweeps += 1
        inc = float(np.max(np.abs(Vn - V))) if V.size else 0.0
        increments.append(inc)
        V = Vn
        if progress_every and sweeps % progress_every == 0:
            log.info("sweep %d increment %.3e", sweeps, inc)
        if inc <= tol:
            break
        if sweeps >= max_sweeps:
            raise NonConvergenceError(sweeps, inc)
    policy, terminate = greedy(prob, V, backup, tie_tol=tol)
    residual = float(np.max(np.abs(backup(V) - V))) if V.size else 0.0
    return Solution(V, policy, terminate, sweeps, residual, increments)


def greedy(prob: MdpProblem, V: np.ndarray, backup: Optional[_Backup] = None,
           tie_tol: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy actions; termination wins ties, then the lowest action id.

    Values closer than ``tie_tol`` count as equal, so rounding noise in a
    converged table cannot pick an action over an equivalent one."""
    backup = backup or _Backup(prob)
    cont, q = backup.cont(V)
    terminate = prob.v_T >= cont - tie_tol
    policy = np.where(terminate, prob.t_action, -1)
    if q.size:
        best = cont[prob.choice_state]
        hit = np.flatnonzero(q >= best - tie_tol)
        # lowest action id among maximizers of each state
        cand = np.full(prob.n_states, np.iinfo(np.int64).max)
        np.minimum.at(cand, prob.choice_state[hit], prob.choice_action[hit])
        take = ~terminate
        policy[take] = cand[take]
    return policy, terminate


def policy_matrix(prob: MdpProblem, policy: np.ndarray, terminate: np.ndarray) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Transition matrix and reward vector of a stationary policy."""
    n = prob.n_states
    chosen = np.flatnonzero(~terminate[prob.choice_state] & (prob.choice_action == policy[prob.choice_state]))
    rows = prob.choice_state[chosen]
    P = sp.csr_matrix(prob.P[chosen])
    sel = sp.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(n, len(rows)))
    Ppi = (sel @ P).tocsr()
    r = np.where(terminate, prob.v_T, 0.0)
    r[rows] = prob.v_C[chosen]
    return Ppi, r


def evaluate_policy(prob: MdpProblem, policy: np.ndarray, terminate: np.ndarray) -> np.ndarray:
    """Solve ``(I - P_pi) V = r_pi`` on the states that continue."""
    import scipy.sparse.linalg as spla

    Ppi, r = policy_matrix(prob, policy, terminate)
    n = prob.n_states
    A = sp.identity(n, format="csr") - Ppi
    return spla.spsolve(A.tocsc(), r)


def brute_force(prob: MdpProblem) -> np.ndarray:
    """Optimal values by enumerating every stationary deterministic policy.

    Assumes every policy terminates almost surely, so each policy value is
    one linear solve."""
    n = prob.n_states
    options: List[List[int]] = []
    for s in range(n):
        opts = [-1] if np.isfinite(prob.v_T[s]) else []
        opts.extend(int(c) for c in np.flatnonzero(prob.choice_state == s))
        options.append(opts)
    P = prob.P.toarray()
    best = np.full(n, -np.inf)
    for combo in itertools.product(*options):
        M = np.zeros((n, n))
        r = np.zeros(n)
        for s, c in enumerate(combo):
            if c < 0:
                r[s] = prob.v_T[s]
            else:
                M[s] = P[c]
                r[s] = prob.v_C[c]
        try:
            V = np.linalg.solve(np.eye(n) - M, r)
        except np.linalg.LinAlgError:
            raise MdpError("a policy never terminates") from None
        best = np.maximum(best, V)
    return best


def random_problem(rng: np.random.Generator, n_states: int, n_actions: int, p_term: float = 0.4) -> MdpProblem:
    """Random valid problem with at most ``n_actions`` actions per state.

    Every continuation row puts mass on a terminate-only state, so all
    policies terminate."""
    choice_state, choice_action, rows, vC = [], [], [], []
    v_T = np.full(n_states, -np.inf)
    t_action = np.full(n_states, -1)
    forced = rng.random(n_states) < 0.25
    forced[rng.integers(n_states)] = True
    forced_idx = np.flatnonzero(forced)
    for s in range(n_states):
        can_stop = forced[s] or rng.random() < p_term
        if can_stop:
            v_T[s] = rng.uniform(0, 5)
            t_action[s] = 0
        if forced[s]:
            continue
        n_c = int(rng.integers(0, n_actions)) if can_stop else int(rng.integers(1, n_actions + 1))
        for a in range(n_c):
            row = rng.random(n_states) * (rng.random(n_states) < 0.6)
            row[rng.choice(forced_idx)] += rng.random() + 0.1
            rows.append(row / row.sum())
            choice_state.append(s)
            choice_action.append(a + 1)
            vC.append(rng.uniform(0, 1) if rng.random() < 0.5 else 0.0)
    P = sp.csr_matrix(np.array(rows)) if rows else sp.csr_matrix((0, n_states))
    return MdpProblem(n_states, P, np.array(choice_state, dtype=int), np.array(choice_action, dtype=int),
                      np.array(vC), v_T, t_action, ["terminate"] + [f"a{i}" for i in range(1, n_actions + 1)])
