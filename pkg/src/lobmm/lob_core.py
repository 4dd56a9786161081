"""Book state, events and the transition rules restricted to the two best limits.

Quantities are in lots (10 contracts). A lot count ``q`` doubles as the size
bin ``[10(q-1), 10q)`` contracts, which is how calibrated laws are indexed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

LOT_CONTRACTS = 10
Q_MAX = 50


class LobError(Exception):
    pass


class ViolationError(LobError):
    """An event is inconsistent with the book it is applied to."""


class StateError(LobError):
    """An operation was called in the wrong book phase."""


class Side(str, Enum):
    BID = "B"
    ASK = "A"

    @property
    def other(self) -> "Side":
        return Side.ASK if self is Side.BID else Side.BID


class OrderKind(str, Enum):
    LIMIT = "L"
    CANCEL = "C"
    MARKET = "M"


class RemovalKind(str, Enum):
    MARKET = "M"
    CANCEL = "C"


class EstablishKind(str, Enum):
    FOLLOW = "F"
    REVERT = "R"


def bin_of(contracts: int) -> int:
    """Size bin of a contract count: ``[10(k-1), 10k)`` maps to ``k``."""
    if contracts < 0:
        raise ValueError(f"negative quantity {contracts}")
    return contracts // LOT_CONTRACTS + 1


def lots_of(contracts: int, q_max: int = Q_MAX) -> int:
    """Queue size in lots; an empty queue stays at 0."""
    if contracts <= 0:
        return 0
    return min(bin_of(contracts), q_max)


def contracts_of(lots: int) -> int:
    """Representative contract count of a lot bin (its midpoint)."""
    return 0 if lots <= 0 else LOT_CONTRACTS * lots - LOT_CONTRACTS // 2


@dataclass(frozen=True)
class PriceGrid:
    tick_size: float = 1.0

    def price_of_level(self, level: int) -> float:
        return level * self.tick_size

    def level_of_price(self, price: float) -> int:
        return int(round(price / self.tick_size))


@dataclass(frozen=True)
class Removal:
    kind: RemovalKind
    size: int


@dataclass(frozen=True)
class BookState:
    """Best bid/ask queues around a reference level.

    ``p_ref`` is the best bid level; the best ask sits at ``p_ref + 1``.
    ``emptied`` names the side waiting for an establishing order, if any.
    """

    q_bid: int
    q_ask: int
    p_ref: int = 0
    last_removal: Optional[Removal] = None
    emptied: Optional[Side] = None
    q_max: int = Q_MAX

    def __post_init__(self):
        for name in ("q_bid", "q_ask"):
            v = getattr(self, name)
            if not 0 <= v <= self.q_max:
                raise ViolationError(f"{name}={v} outside [0, {self.q_max}]")

    @property
    def awaiting(self) -> bool:
        return self.emptied is not None

    @property
    def bid_level(self) -> int:
        return self.p_ref

    @property
    def ask_level(self) -> int:
        return self.p_ref + 1

    def queue(self, side: Side) -> int:
        return self.q_bid if side is Side.BID else self.q_ask

    def with_queue(self, side: Side, q: int) -> "BookState":
        if side is Side.BID:
            return replace(self, q_bid=q)
        return replace(self, q_ask=q)

    def to_dict(self) -> dict:
        return {
            "q_bid": self.q_bid,
            "q_ask": self.q_ask,
            "p_ref": self.p_ref,
            "last_removal": None if self.last_removal is None
            else {"o_r": self.last_removal.kind.value, "q_r": self.last_removal.size},
            "emptied": None if self.emptied is None else self.emptied.value,
            "q_max": self.q_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BookState":
        lr = d.get("last_removal")
        return cls(
            q_bid=int(d["q_bid"]),
            q_ask=int(d["q_ask"]),
            p_ref=int(d.get("p_ref", 0)),
            last_removal=None if lr is None else Removal(RemovalKind(lr["o_r"]), int(lr["q_r"])),
            emptied=None if d.get("emptied") is None else Side(d["emptied"]),
            q_max=int(d.get("q_max", Q_MAX)),
        )


@dataclass(frozen=True)
class Event:
    time: float
    kind: OrderKind
    side: Side
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ViolationError(f"event size must be >= 1, got {self.size}")

    def to_dict(self) -> dict:
        return {"time": self.time, "kind": self.kind.value, "side": self.side.value, "size": self.size}

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        return cls(float(d["time"]), OrderKind(d["kind"]), Side(d["side"]), int(d["size"]))


@dataclass(frozen=True)
class EstablishEvent:
    o_e: EstablishKind
    q_e: int
    dt: float

    def __post_init__(self):
        if self.q_e < 1:
            raise ViolationError(f"q_e must be >= 1, got {self.q_e}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ViolationError(f"dt must be positive, got {self.dt}")

    def to_dict(self) -> dict:
        return {"o_e": self.o_e.value, "q_e": self.q_e, "dt": self.dt}

    @classmethod
    def from_dict(cls, d: dict) -> "EstablishEvent":
        return cls(EstablishKind(d["o_e"]), int(d["q_e"]), float(d["dt"]))


def apply_event(state: BookState, e: Event) -> BookState:
    if state.awaiting:
        raise StateError(f"book awaiting establishment on side {state.emptied.value}")
    q = state.queue(e.side)
    if e.kind is OrderKind.LIMIT:
        return state.with_queue(e.side, min(q + e.size, state.q_max))
    if e.size > q:
        raise ViolationError(
            f"oversize {e.kind.name.lower()} on side {e.side.value}: size {e.size} > queue {q}"
        )
    new = state.with_queue(e.side, q - e.size)
    if q - e.size == 0:
        new = replace(new, last_removal=Removal(RemovalKind(e.kind.value), e.size), emptied=e.side)
    return new


def apply_establishment(state: BookState, est: EstablishEvent, hidden_draw: int) -> BookState:
    """Close the spread after ``state.emptied`` was cleared.

    A revert refills the emptied limit. A follow moves the price one tick
    towards the emptied side: the establishing order sits at the old level on
    the opposite side and the newly revealed limit on the emptied side gets
    ``hidden_draw`` lots.
    """
    if not state.awaiting:
        raise StateError("no side is awaiting establishment")
    s = state.emptied
    q_e = min(est.q_e, state.q_max)
    if est.o_e is EstablishKind.REVERT:
        return replace(state.with_queue(s, q_e), emptied=None)
    if not 1 <= hidden_draw <= state.q_max:
        raise ViolationError(f"hidden draw {hidden_draw} outside [1, {state.q_max}]")
    if s is Side.ASK:
        return replace(state, q_bid=q_e, q_ask=hidden_draw, p_ref=state.p_ref + 1, emptied=None)
    return replace(state, q_bid=hidden_draw, q_ask=q_e, p_ref=state.p_ref - 1, emptied=None)
