"""Binary value tables with a JSON sidecar.

``values.bin`` layout: 8-byte magic ``LOBMMVAL``, u32 format version, u32
reserved, u64 element count, then that many little-endian f64. The sidecar
``values.bin.json`` describes how states map to positions in the array.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

MAGIC = b"LOBMMVAL"
VERSION = 1
_HEAD = struct.Struct("<8sIIQ")


class StoreError(ValueError):
    pass


def sidecar_path(path: Union[str, Path]) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def _pack_bits(mask: np.ndarray) -> str:
    return np.packbits(mask.astype(bool).ravel()).tobytes().hex()


def _unpack_bits(hexstr: str, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return np.unpackbits(np.frombuffer(bytes.fromhex(hexstr), dtype=np.uint8))[:n].astype(bool).reshape(shape)


def write_values(path: Union[str, Path], values: np.ndarray, meta: dict) -> Tuple[Path, Path]:
    path = Path(path)
    v = np.ascontiguousarray(values, dtype="<f8").ravel()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, 0, v.size))
        fh.write(v.tobytes())
    side = sidecar_path(path)
    side.write_text(json.dumps({"format": "lobmm-values", "version": VERSION, "count": int(v.size), **meta},
                               indent=1, sort_keys=True))
    return path, side


def read_values(path: Union[str, Path]) -> Tuple[np.ndarray, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such value table")
    raw = path.read_bytes()
    if len(raw) < _HEAD.size:
        raise StoreError(f"{path}: truncated header")
    magic, version, _, count = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise StoreError(f"{path}: not a value table")
    if version != VERSION:
        raise StoreError(f"{path}: unsupported version {version}")
    if len(raw) != _HEAD.size + 8 * count:
        raise StoreError(f"{path}: expected {count} values, file has {(len(raw) - _HEAD.size) // 8}")
    V = np.frombuffer(raw, dtype="<f8", offset=_HEAD.size, count=count).astype(np.float64)
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"{side}: missing sidecar for {path}")
    meta = json.loads(side.read_text())
    if meta.get("count") != count:
        raise StoreError(f"{side}: sidecar count {meta.get('count')} does not match {count}")
    return V, meta


def _solution_meta(sol) -> dict:
    return {"residual": sol.residual, "sweeps": sol.sweeps}


def one_unit_meta(m) -> dict:
    """Groups are listed as ``name: [start, size]``; see ``OneUnitModel.idx_*``."""
    k = m.kernel
    return {"problem": "buy-one", "Q": k.Q, "K": k.K, "D": m.D, "units": "ticks",
            "groups": {g: list(v) for g, v in m.layout.groups.items()},
            "index": {"A": "start + own_index(x, y) * Q + (q - 1)", "own_index": "(x-1)*x/2 + (y-1)"},
            "decisions": _pack_bits(m.solution.policy == 0),
            **_solution_meta(m.solution)}


def pair_meta(pm) -> dict:
    k = pm.kernel
    n = k.n_own
    p0 = pm.layout.start("P")
    return {"problem": "pair", "Q": k.Q, "K": k.K, "S": pm.S, "shift": pm.S, "units": "ticks",
            "groups": {g: list(v) for g, v in pm.layout.groups.items()},
            "pair_block": {"offset": p0, "shape": [n, n], "strides": [n, 1]},
            "index": {"pair": "offset + own_index(xb, yb) * n_own + own_index(xa, ya)",
                      "own_index": "(x-1)*x/2 + (y-1)"},
            "keep": _pack_bits(pm.solution.policy[p0:p0 + n * n] == 0),
            **_solution_meta(pm.solution)}


def extended_meta(em) -> dict:
    from .extended import _components
    k = em.kernel
    n = k.n_own
    comps = _components(k.Q, em.G)
    n_comp = len(comps)
    # own components come first, so the own-own block is a strided window
    block = em.solution.policy[:n * n_comp].reshape(n, n_comp)[:, :n]
    return {"problem": "pair-ext", "Q": k.Q, "K": k.K, "S": em.S, "G": em.G, "shift": em.S, "units": "ticks",
            "components": [list(c) for c in comps],
            "pair_block": {"offset": 0, "shape": [n, n], "strides": [n_comp, 1]},
            "index": {"pair": "index(cb) * n_components + index(ca)", "own_index": "(x-1)*x/2 + (y-1)"},
            "keep": _pack_bits(block != 1),
            "actions": list(em.problem.action_names),
            **_solution_meta(em.solution)}


def save_model(path: Union[str, Path], model, extra: dict = None) -> Tuple[Path, Path]:
    from .extended import ExtendedPairModel
    from .problems import OneUnitModel, PairModel
    if isinstance(model, PairModel):
        meta = pair_meta(model)
    elif isinstance(model, ExtendedPairModel):
        meta = extended_meta(model)
    elif isinstance(model, OneUnitModel):
        meta = one_unit_meta(model)
    else:
        raise TypeError(f"cannot store {type(model).__name__}")
    meta.update(extra or {})
    return write_values(path, model.solution.V, meta)


def pair_block(V: np.ndarray, meta: dict) -> Tuple[np.ndarray, np.ndarray]:
    """Shifted-back pair values over own-queue states and the keep mask."""
    if meta.get("problem") not in ("pair", "pair-ext"):
        raise StoreError(f"value table holds a {meta.get('problem')!r} problem, a pair problem is needed")
    b = meta["pair_block"]
    n0, n1 = b["shape"]
    s0, s1 = b["strides"]
    idx = b["offset"] + np.arange(n0)[:, None] * s0 + np.arange(n1)[None, :] * s1
    values = V[idx] - meta["shift"]
    keep = _unpack_bits(meta["keep"], (n0, n1))
    return values, keep
