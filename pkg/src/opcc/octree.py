"""Morton-ordered octree levels.

Conventions (frozen for bitstream compatibility):

* Morton interleave puts x in the least significant bit of each triplet:
  bit ``3i`` is bit ``i`` of x, ``3i+1`` of y, ``3i+2`` of z.
* A child's local index inside its parent is ``cx + 2*cy + 4*cz``, which is
  exactly the low three bits of its Morton code.
* ``OctreeLevels.codes[l]`` holds the occupancy codes of the level ``l-1``
  nodes, i.e. it has one entry per parent and describes level ``l``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ContractViolation
from .pcio import MAX_DEPTH, OutOfRangeError

__all__ = [
    "ContractViolation",
    "CHILD_OFFSETS",
    "NEIGHBOR_OFFSETS",
    "morton_encode",
    "morton_encode_array",
    "morton_decode_array",
    "sort_dedup_morton",
    "downsample",
    "occupancy_codes",
    "upsample_coords",
    "neighbor_table",
    "neighbor_counts",
    "OctreeLevels",
    "build_levels",
    "default_min_level",
]


# offset(b) for child bit b
CHILD_OFFSETS = np.array([[b & 1, (b >> 1) & 1, (b >> 2) & 1] for b in range(8)], dtype=np.int64)

# 3x3x3 offsets in kernel order: index = (dx+1) + 3*(dy+1) + 9*(dz+1); 13 is the center
NEIGHBOR_OFFSETS = np.array(
    [[dx, dy, dz] for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)],
    dtype=np.int64,
)

_BIT_RANGE = np.arange(8, dtype=np.int64)


def _split3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact3(v: np.ndarray) -> np.ndarray:
    v = v & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(coord, depth: int) -> int:
    """Interleave one ``(x, y, z)`` triple of ``depth``-bit components."""
    if not 0 <= depth <= MAX_DEPTH:
        raise OutOfRangeError(f"depth must be in 0..{MAX_DEPTH}")
    x, y, z = (int(c) for c in coord)
    for c in (x, y, z):
        if c < 0 or c >= (1 << depth):
            raise OutOfRangeError(f"component {c} does not fit in {depth} bits")
    return int(morton_encode_array(np.array([[x, y, z]]))[0])


def morton_encode_array(coords: np.ndarray) -> np.ndarray:
    """Vectorized Morton encode; components must already be in range."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    code = _split3(coords[:, 0]) | (_split3(coords[:, 1]) << np.uint64(1)) \
        | (_split3(coords[:, 2]) << np.uint64(2))
    return code.astype(np.int64)


def morton_decode_array(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64).astype(np.uint64)
    out = np.empty((len(codes), 3), dtype=np.int64)
    out[:, 0] = _compact3(codes)
    out[:, 1] = _compact3(codes >> np.uint64(1))
    out[:, 2] = _compact3(codes >> np.uint64(2))
    return out


def _check_range(coords: np.ndarray, depth: int) -> None:
    if len(coords) and (coords.min() < 0 or coords.max() >= (1 << depth)):
        raise OutOfRangeError(f"coordinates do not fit in {depth} bits")


def _require_sorted(codes: np.ndarray, what: str) -> None:
    if len(codes) > 1 and not np.all(codes[1:] > codes[:-1]):
        raise ContractViolation(f"{what} must be strictly increasing in Morton order")


def sort_dedup_morton(coords: np.ndarray, depth: int = MAX_DEPTH) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    _check_range(coords, depth)
    if len(coords) == 0:
        return coords.copy()
    _, first = np.unique(morton_encode_array(coords), return_index=True)
    return coords[first]


def downsample(coords: np.ndarray) -> np.ndarray:
    """Floor-halve Morton-sorted coords and drop consecutive duplicates."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    _require_sorted(morton_encode_array(coords), "downsample input")
    half = coords >> 1
    if len(half) < 2:
        return half
    keep = np.empty(len(half), dtype=bool)
    keep[0] = True
    np.any(half[1:] != half[:-1], axis=1, out=keep[1:])
    return half[keep]


def occupancy_codes(parents: np.ndarray, children: np.ndarray) -> np.ndarray:
    """Pack the children of every parent into an 8-bit code, parent order."""
    parents = np.asarray(parents, dtype=np.int64).reshape(-1, 3)
    children = np.asarray(children, dtype=np.int64).reshape(-1, 3)
    pcode = morton_encode_array(parents)
    ccode = morton_encode_array(children)
    _require_sorted(pcode, "parents")
    _require_sorted(ccode, "children")
    owner = ccode >> 3
    pid = np.searchsorted(pcode, owner)
    if len(children) and (pid.max() >= len(pcode) or np.any(pcode[pid] != owner)):
        raise ContractViolation("children are not all covered by the parent set")
    codes = np.bincount(pid, weights=(1 << (ccode & 7)), minlength=len(pcode)).astype(np.int64)
    if len(codes) and codes.min() == 0:
        raise ContractViolation("a parent has no occupied child")
    return codes


def upsample_coords(parents: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Expand each parent into its occupied children (ascending child bit)."""
    parents = np.asarray(parents, dtype=np.int64).reshape(-1, 3)
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    if len(codes) != len(parents):
        raise ContractViolation("need exactly one occupancy code per parent")
    if len(codes) and (codes.min() < 1 or codes.max() > 255):
        raise ContractViolation("occupancy codes must lie in 1..255")
    mask = ((codes[:, None] >> _BIT_RANGE) & 1).astype(bool)
    kids = (parents[:, None, :] << 1) + CHILD_OFFSETS[None, :, :]
    return kids[mask]


def neighbor_table(coords: np.ndarray, offsets: np.ndarray = NEIGHBOR_OFFSETS) -> np.ndarray:
    """Row index of ``coords[i] + offsets[j]`` in ``coords``, or -1.

    ``coords`` must be Morton-sorted and unique; result is ``(N, len(offsets))``.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    n = len(coords)
    table = np.full((n, len(offsets)), -1, dtype=np.int64)
    if n == 0:
        return table
    bits = max(1, int(coords.max()).bit_length()) + 1
    if 3 * bits <= 62:
        # row-major keys on a grid padded by one cell, so an offset is a
        # constant key delta and nothing needs re-encoding
        side = 1 << bits
        key = ((coords[:, 0] + 1) * side + (coords[:, 1] + 1)) * side + (coords[:, 2] + 1)
        order = np.argsort(key, kind="stable")
        skey = key[order]
        for j, off in enumerate(offsets):
            q = key + int((off[0] * side + off[1]) * side + off[2])
            pos = np.searchsorted(skey, q)
            pos[pos == n] = 0
            hit = skey[pos] == q
            table[:, j] = np.where(hit, order[pos], -1)
        return table
    keys = morton_encode_array(coords)
    lim = 1 << MAX_DEPTH
    for j, off in enumerate(offsets):
        q = coords + off
        ok = np.all((q >= 0) & (q < lim), axis=1)
        qk = morton_encode_array(q[ok])
        pos = np.searchsorted(keys, qk)
        pos[pos == n] = 0
        hit = keys[pos] == qk
        col = np.full(n, -1, dtype=np.int64)
        idx = np.flatnonzero(ok)
        col[idx[hit]] = pos[hit]
        table[:, j] = col
    return table


def neighbor_counts(coords: np.ndarray) -> np.ndarray:
    """Occupied voxels among the 26 neighbors of each node (center excluded)."""
    table = neighbor_table(coords)
    table = np.delete(table, 13, axis=1)
    return (table >= 0).sum(axis=1)


def default_min_level(max_level: int) -> int:
    return max(0, max_level - 11)


@dataclass
class OctreeLevels:
    max_level: int
    min_level: int
    coords: Dict[int, np.ndarray] = field(default_factory=dict)
    codes: Dict[int, np.ndarray] = field(default_factory=dict)

    def count(self, level: int) -> int:
        return len(self.coords[level])

    def node_codes(self, level: int) -> np.ndarray:
        """Occupancy codes carried by the level-``level`` nodes."""
        return self.codes[level + 1]

    @property
    def levels(self):
        return range(self.min_level, self.max_level + 1)


def build_levels(coords, max_level: int, min_level: Optional[int] = None) -> OctreeLevels:
    """Build every level from ``max_level`` down to ``min_level``.

    ``coords`` may be an integer array or any object with a ``coords``
    attribute (e.g. a ``QuantizedCloud``).
    """
    coords = getattr(coords, "coords", coords)
    if min_level is None:
        min_level = default_min_level(max_level)
    if not 0 <= min_level <= max_level <= MAX_DEPTH:
        raise ContractViolation(f"invalid level range [{min_level}, {max_level}]")
    leaves = sort_dedup_morton(coords, depth=max_level)
    out = OctreeLevels(max_level, min_level)
    out.coords[max_level] = leaves
    for lv in range(max_level, min_level, -1):
        parents = downsample(out.coords[lv])
        out.coords[lv - 1] = parents
        out.codes[lv] = occupancy_codes(parents, out.coords[lv])
    return out
