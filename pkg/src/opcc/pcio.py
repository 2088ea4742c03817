"""Point cloud I/O and the two KITTI quantization schemes.

A raw cloud is an ``(N, 3)`` float64 array in meters. Quantization maps it to
a deduplicated set of non-negative integer voxel coordinates that the octree
coder consumes.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

__all__ = [
    "MalformedFileError",
    "UnsupportedLayoutError",
    "OutOfRangeError",
    "QuantMode",
    "QuantConfig",
    "QuantizedCloud",
    "POSQ_VALUES",
    "MAX_DEPTH",
    "read_kitti_bin",
    "write_kitti_bin",
    "read_ply",
    "write_ply",
    "read_cloud",
    "quantize",
    "dequantize",
    "max_dequantization_error",
]

POSQ_VALUES = (8, 16, 32, 64, 128, 256, 512)
# Morton codes are packed into int64: three 21-bit axes.
MAX_DEPTH = 21


class MalformedFileError(ValueError):
    pass


class UnsupportedLayoutError(ValueError):
    pass


class OutOfRangeError(ValueError):
    pass


class QuantMode(str, enum.Enum):
    BOX16 = "box16"
    SCALE_POSQ = "scale_posq"


@dataclass(frozen=True)
class QuantConfig:
    mode: QuantMode = QuantMode.BOX16
    box_size: float = 400.0
    box_center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    bit_depth: int = 16
    global_scale: float = 10000.0
    posq: int = 8
    # Per-axis minimum removed in SCALE_POSQ mode, in quantized units.
    shift: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", QuantMode(self.mode))
        object.__setattr__(self, "box_center", tuple(float(c) for c in self.box_center))
        if self.mode is QuantMode.BOX16:
            if not 1 <= self.bit_depth <= 16:
                raise ValueError(f"bit_depth must be in 1..16, got {self.bit_depth}")
            if not self.box_size > 0:
                raise ValueError(f"box_size must be positive, got {self.box_size}")
        else:
            if self.posq not in POSQ_VALUES:
                raise ValueError(f"posq must be one of {POSQ_VALUES}, got {self.posq}")
            if not self.global_scale > 0:
                raise ValueError(f"global_scale must be positive, got {self.global_scale}")

    @property
    def voxel_size(self) -> float:
        """Edge length of one voxel in meters."""
        if self.mode is QuantMode.BOX16:
            return self.box_size / (1 << self.bit_depth)
        return self.posq / self.global_scale


@dataclass
class QuantizedCloud:
    coords: np.ndarray
    config: QuantConfig
    effective_depth: int
    # Point count before deduplication; bits-per-point divides by this.
    orig_count: int = field(default=-1)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if self.orig_count < 0:
            self.orig_count = len(self.coords)

    def __len__(self) -> int:
        return len(self.coords)

    def coord_set(self) -> np.ndarray:
        """Coordinates in lexicographic order, for set comparisons."""
        return np.unique(self.coords, axis=0) if len(self.coords) else self.coords

    def same_coords(self, other: "QuantizedCloud") -> bool:
        a, b = self.coord_set(), other.coord_set()
        return a.shape == b.shape and bool(np.array_equal(a, b))


# --------------------------------------------------------------------------
# KITTI velodyne .bin
# --------------------------------------------------------------------------

def read_kitti_bin(raw: bytes) -> np.ndarray:
    """Parse records of four little-endian float32 (x, y, z, intensity)."""
    if len(raw) % 16:
        raise MalformedFileError(
            f"KITTI .bin length {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return rec[:, :3].astype(np.float64)


def write_kitti_bin(points: np.ndarray, intensity: float = 0.0) -> bytes:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rec = np.empty((len(points), 4), dtype="<f4")
    rec[:, :3] = points
    rec[:, 3] = intensity
    return rec.tobytes()


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(buf: bytes):
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise MalformedFileError("not a PLY file")
    nl = buf.find(b"\n", end)
    body_start = len(buf) if nl < 0 else nl + 1
    lines = buf[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MalformedFileError("property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], None))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise UnsupportedLayoutError(f"unknown PLY type {tok[1]!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedLayoutError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def read_ply(raw: bytes) -> np.ndarray:
    fmt, elements, body_start = _parse_ply_header(raw)
    if not elements or elements[0][0] != "vertex":
        raise UnsupportedLayoutError("PLY must start with a vertex element")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise UnsupportedLayoutError(f"PLY vertex element lacks property {axis!r}")
    if any(p[1] is None for p in props):
        raise UnsupportedLayoutError("list properties on vertices are not supported")
    cols = [names.index(a) for a in "xyz"]
    if count == 0:
        return np.zeros((0, 3), dtype=np.float64)
    if fmt == "ascii":
        text = raw[body_start:].decode("ascii").split("\n")
        rows = [ln.split() for ln in text[:count]]
        if len(rows) < count or any(len(r) < len(props) for r in rows):
            raise MalformedFileError("truncated ASCII PLY body")
        # float() on the stored token keeps full precision for doubles.
        return np.array([[float(r[c]) for c in cols] for r in rows], dtype=np.float64)
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    need = dtype.itemsize * count
    if len(raw) - body_start < need:
        raise MalformedFileError("truncated binary PLY body")
    rec = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
    return np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1)


def write_ply(points: np.ndarray, binary: bool = True, dtype: str = "double") -> bytes:
    """Serialize vertices; ``dtype`` is a PLY scalar type name such as
    ``double``, ``float`` or ``int``."""
    points = np.asarray(points).reshape(-1, 3)
    np_t = _PLY_TYPES[dtype]
    out = io.BytesIO()
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(points)}\n"
        + "".join(f"property {dtype} {a}\n" for a in "xyz")
        + "end_header\n"
    )
    out.write(header.encode("ascii"))
    if binary:
        out.write(np.ascontiguousarray(points, dtype="<" + np_t).tobytes())
    else:
        arr = points.astype(np_t)
        conv = repr if np_t.startswith("f") else str
        for row in arr.tolist():
            out.write((" ".join(conv(v) for v in row) + "\n").encode("ascii"))
    return out.getvalue()


def read_cloud(path) -> np.ndarray:
    """Read a ``.bin`` (KITTI) or ``.ply`` file by extension."""
    path = str(path)
    with open(path, "rb") as f:
        raw = f.read()
    if path.lower().endswith(".bin"):
        return read_kitti_bin(raw)
    if path.lower().endswith(".ply"):
        return read_ply(raw)
    raise UnsupportedLayoutError(f"unknown point cloud extension: {path}")


# --------------------------------------------------------------------------
# Quantization
# --------------------------------------------------------------------------

def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def _depth_for(coords: np.ndarray) -> int:
    if len(coords) == 0:
        return 1
    top = int(coords.max())
    return max(1, top.bit_length())


def quantize(points: np.ndarray, cfg: QuantConfig) -> QuantizedCloud:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise ValueError("point coordinates must be finite")
    n = len(points)
    if cfg.mode is QuantMode.BOX16:
        side = 1 << cfg.bit_depth
        center = np.asarray(cfg.box_center)
        scaled = (points - center + cfg.box_size / 2.0) / cfg.box_size * side
        c = np.floor(scaled)
        if n and (c.min() < 0 or c.max() >= side):
            raise OutOfRangeError(
                f"points fall outside the {cfg.box_size} m box around {cfg.box_center}")
        coords = c.astype(np.int64)
        depth = cfg.bit_depth
        out_cfg = cfg
    else:
        r = _round_half_away(points * cfg.global_scale / cfg.posq).astype(np.int64)
        if n:
            lo = r.min(axis=0)
            coords = r - lo
            shift = tuple(int(v) for v in lo)
        else:
            coords = r
            shift = (0, 0, 0)
        depth = _depth_for(coords)
        out_cfg = replace(cfg, shift=shift)
    if depth > MAX_DEPTH:
        raise OutOfRangeError(f"quantized extent needs {depth} bits, limit is {MAX_DEPTH}")
    if n:
        coords = np.unique(coords, axis=0)
    return QuantizedCloud(coords, out_cfg, depth, orig_count=n)


def dequantize(qc: QuantizedCloud) -> np.ndarray:
    """Voxel-center reconstruction in meters."""
    cfg = qc.config
    c = qc.coords.astype(np.float64)
    if len(c) == 0:
        return np.zeros((0, 3), dtype=np.float64)
    if cfg.mode is QuantMode.BOX16:
        side = 1 << cfg.bit_depth
        return (c + 0.5) / side * cfg.box_size - cfg.box_size / 2.0 + np.asarray(cfg.box_center)
    shift = np.asarray(cfg.shift if cfg.shift is not None else (0, 0, 0), dtype=np.float64)
    return (c + shift) * cfg.posq / cfg.global_scale


def max_dequantization_error(cfg: QuantConfig) -> float:
    """Half a voxel edge: bound on the per-axis reconstruction error."""
    return cfg.voxel_size / 2.0 if cfg.mode is QuantMode.BOX16 else cfg.posq / (2.0 * cfg.global_scale)

