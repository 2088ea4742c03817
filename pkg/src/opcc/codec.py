"""End-to-end geometry encoder and decoder.

Stream layout (little-endian, see ``docs/bitstream.md``)::

    header (HEADER_SIZE bytes) | range-coded payload

The payload is one range-coder stream. It holds the coarsest-level
coordinates (adaptive order-0 per axis byte), then the occupancy codes of
every level from ``min_level`` to ``max_level - 1`` in Morton order.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from .context import ContextModel, TreeState, VARIANTS
from .entropy import (
    FREQ_BITS,
    FREQ_TOTAL,
    NUM_OCC_SYMBOLS,
    AdaptiveModel,
    RangeDecoder,
    RangeEncoder,
    quantize_distributions,
)
from .errors import CorruptStreamError, ModelMismatchError, StreamUnderflowError
from .octree import build_levels, default_min_level, morton_encode_array
from .pcio import MAX_DEPTH, QuantConfig, QuantizedCloud, QuantMode
from .checkpoint import model_checksum

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_SIZE",
    "Header",
    "LevelStats",
    "EncodeResult",
    "encode",
    "decode",
    "measure",
    "read_header",
]

MAGIC = b"OPCC"
VERSION = 1
MODEL_FREQ = 0
MODEL_LEARNED = 1

# magic, version, model kind, variant, L, m, t_offset, width, quant mode,
# box size, center xyz, bit depth, global scale, posQ, shift xyz,
# coarse count, voxel count, original count, model checksum, geometry crc,
# payload length
_HEADER = struct.Struct("<4sBBBBBBHB d3dB dH3q III8sII")
HEADER_SIZE = _HEADER.size


@dataclass
class Header:
    model_kind: int
    variant: int
    max_level: int
    min_level: int
    t_offset: int
    channel_width: int
    quant: QuantConfig
    coarse_count: int
    voxel_count: int
    orig_count: int
    checksum: bytes
    geometry_crc: int
    payload_length: int

    def pack(self) -> bytes:
        q = self.quant
        shift = q.shift if q.shift is not None else (0, 0, 0)
        return _HEADER.pack(
            MAGIC, VERSION, self.model_kind, self.variant, self.max_level, self.min_level,
            self.t_offset, self.channel_width, 0 if q.mode is QuantMode.BOX16 else 1,
            q.box_size, *q.box_center, q.bit_depth, q.global_scale, q.posq, *shift,
            self.coarse_count, self.voxel_count, self.orig_count, self.checksum, self.geometry_crc,
            self.payload_length)

    @classmethod
    def unpack(cls, data: bytes) -> "Header":
        if len(data) < 4 or data[:4] != MAGIC:
            raise CorruptStreamError("not an OPCC stream (bad magic)")
        if len(data) < HEADER_SIZE:
            raise StreamUnderflowError("stream shorter than its header")
        f = _HEADER.unpack_from(data)
        (_, version, kind, variant, L, m, t_off, width, qmode, box, cx, cy, cz, bd,
         gscale, posq, sx, sy, sz, coarse, voxels, orig, checksum, crc, plen) = f
        if version != VERSION:
            raise CorruptStreamError(f"unsupported stream version {version}")
        if kind not in (MODEL_FREQ, MODEL_LEARNED) or qmode not in (0, 1) or variant >= len(VARIANTS):
            raise CorruptStreamError("invalid header enumeration value")
        if not m <= L <= MAX_DEPTH:
            raise CorruptStreamError("invalid octree level range in header")
        try:
            if qmode == 0:
                quant = QuantConfig(QuantMode.BOX16, box_size=box, box_center=(cx, cy, cz), bit_depth=bd)
            else:
                quant = QuantConfig(QuantMode.SCALE_POSQ, global_scale=gscale, posq=posq,
                                    shift=(sx, sy, sz))
        except ValueError as e:
            raise CorruptStreamError(f"invalid quantization parameters: {e}") from None
        if coarse > voxels:
            raise CorruptStreamError("coarse level larger than the leaf level")
        return cls(kind, variant, L, m, t_off, width, quant, coarse, voxels, orig, checksum, crc, plen)


def read_header(data: bytes) -> Header:
    return Header.unpack(data)


def _geometry_crc(coords: np.ndarray) -> int:
    keys = np.sort(morton_encode_array(coords)) if len(coords) else np.zeros(0, np.int64)
    return zlib.crc32(keys.astype("<i8").tobytes())


@dataclass
class LevelStats:
    level: int
    symbols: int
    coded_bits: float
    model_bits: Optional[float] = None


@dataclass
class EncodeResult:
    data: bytes
    header_bits: int
    coarse_bits: float
    levels: List[LevelStats] = field(default_factory=list)
    orig_count: int = 0
    seconds: float = 0.0

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)

    @property
    def payload_bits(self) -> int:
        return self.total_bits - self.header_bits

    @property
    def ideal_bits(self) -> float:
        return self.coarse_bits + sum(s.coded_bits for s in self.levels)

    @property
    def bpp(self) -> float:
        return self.total_bits / self.orig_count if self.orig_count else 0.0


# --------------------------------------------------------------------------
# Occupancy-code sources shared by encoder and decoder
# --------------------------------------------------------------------------

class _FreqSource:
    """Adaptive order-0 model over the 255 codes, reset at every level."""

    def begin_level(self, st: TreeState, level: int, count: int) -> None:
        self.model = AdaptiveModel(NUM_OCC_SYMBOLS, 1)

    def encode_level(self, enc: RangeEncoder, symbols: np.ndarray) -> float:
        return self.model.encode_many(enc, symbols)

    def decode_level(self, dec: RangeDecoder, count: int) -> np.ndarray:
        return np.array(self.model.decode_many(dec, count), dtype=np.int64)


class _LearnedSource:
    def __init__(self, model: ContextModel):
        self.model = model

    def begin_level(self, st: TreeState, level: int, count: int) -> None:
        with torch.no_grad():
            probs = self.model.predict_level(st, level).double().numpy()
        if len(probs) != count:
            raise CorruptStreamError("prediction rows do not match the level size")
        self.probs = probs
        self.freq = quantize_distributions(probs, FREQ_TOTAL)
        self.cum = np.zeros((count, NUM_OCC_SYMBOLS + 1), dtype=np.int64)
        np.cumsum(self.freq, axis=1, out=self.cum[:, 1:])

    def encode_level(self, enc: RangeEncoder, symbols: np.ndarray) -> float:
        rows = np.arange(len(symbols))
        f = self.freq[rows, symbols - 1]
        enc.encode_many(self.cum[rows, symbols - 1], f, FREQ_TOTAL)
        return float(-(np.log2(f) - FREQ_BITS).sum())

    def decode_level(self, dec: RangeDecoder, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        cum, freq = self.cum, self.freq
        for i in range(count):
            row = cum[i]
            v = dec.target(FREQ_TOTAL)
            j = int(row.searchsorted(v, side="right")) - 1
            dec.consume(int(row[j]), int(freq[i, j]))
            out[i] = j + 1
        return out

    def model_bits_for(self, symbols: np.ndarray) -> float:
        p = self.probs[np.arange(len(symbols)), symbols - 1]
        return float(-np.log2(p).sum())


def _coord_bytes(level: int) -> int:
    return (level + 7) // 8


def _levels_for(qc: QuantizedCloud, model: Optional[ContextModel]):
    if model is not None:
        L, m = model.cfg.max_level, model.cfg.min_level
        if len(qc) and int(qc.coords.max()) >= (1 << L):
            raise ModelMismatchError(
                f"cloud needs {qc.effective_depth} bits per axis, model codes {L}")
    else:
        L = max(qc.effective_depth, 1)
        m = default_min_level(L)
    return L, m


def encode(qc: QuantizedCloud, model: Optional[ContextModel] = None) -> EncodeResult:
    """Losslessly code ``qc``; ``model=None`` selects the frequency baseline."""
    t0 = time.perf_counter()
    L, m = _levels_for(qc, model)
    cfg = model.cfg if model is not None else None
    source = _LearnedSource(model) if model is not None else _FreqSource()
    enc = RangeEncoder()
    coarse_bits = 0.0
    stats: List[LevelStats] = []
    n_coarse = 0
    if len(qc):
        levels = build_levels(qc.coords, L, m)
        coarse = levels.coords[m]
        n_coarse = len(coarse)
        nb = _coord_bytes(m)
        for axis in range(3):
            for b in range(nb):
                am = AdaptiveModel(256, 0)
                coarse_bits += am.encode_many(enc, (coarse[:, axis] >> (8 * b)) & 0xFF)
        st = TreeState.from_levels(levels)
        for level in range(m, L):
            symbols = levels.node_codes(level)
            source.begin_level(st, level, len(symbols))
            bits = source.encode_level(enc, symbols)
            mb = source.model_bits_for(symbols) if model is not None else None
            stats.append(LevelStats(level, len(symbols), bits, mb))
    payload = enc.finish() if len(qc) else b""
    header = Header(
        MODEL_LEARNED if model is not None else MODEL_FREQ,
        VARIANTS.index(cfg.variant) if cfg else 0,
        L, m, cfg.t_offset if cfg else 0, cfg.channel_width if cfg else 0,
        qc.config, n_coarse, len(qc), qc.orig_count,
        model_checksum(model)[:8] if model is not None else bytes(8),
        _geometry_crc(qc.coords), len(payload))
    data = header.pack() + payload
    return EncodeResult(data, 8 * HEADER_SIZE, coarse_bits, stats, qc.orig_count,
                        time.perf_counter() - t0)


def decode(data: bytes, model: Optional[ContextModel] = None) -> QuantizedCloud:
    h = Header.unpack(data)
    payload = data[HEADER_SIZE:]
    if len(payload) != h.payload_length:
        if len(payload) < h.payload_length:
            raise StreamUnderflowError("payload is truncated")
        raise CorruptStreamError("payload is longer than the header declares")
    if h.model_kind == MODEL_LEARNED:
        if model is None:
            raise ModelMismatchError("stream was coded with a learned model; a checkpoint is required")
        c = model.cfg
        if (c.max_level, c.min_level, c.t_offset, c.channel_width, VARIANTS.index(c.variant)) != \
                (h.max_level, h.min_level, h.t_offset, h.channel_width, h.variant):
            raise ModelMismatchError("checkpoint configuration differs from the stream header")
        if model_checksum(model)[:8] != h.checksum:
            raise ModelMismatchError("checkpoint checksum does not match the stream")
        source = _LearnedSource(model)
    elif h.model_kind == MODEL_FREQ:
        source = _FreqSource()
    L, m = h.max_level, h.min_level
    if h.coarse_count == 0:
        if payload:
            raise CorruptStreamError("empty cloud with a non-empty payload")
        coords = np.zeros((0, 3), dtype=np.int64)
    else:
        if m == 0 and h.coarse_count != 1:
            raise CorruptStreamError("level 0 holds exactly one node")
        if h.coarse_count > 8 ** m:
            raise CorruptStreamError("coarse node count exceeds the level capacity")
        dec = RangeDecoder(payload)
        nb = _coord_bytes(m)
        coarse = np.zeros((h.coarse_count, 3), dtype=np.int64)
        for axis in range(3):
            for b in range(nb):
                am = AdaptiveModel(256, 0)
                vals = np.array(am.decode_many(dec, h.coarse_count), dtype=np.int64)
                coarse[:, axis] |= vals << (8 * b)
        if coarse.max() >= (1 << m):
            raise CorruptStreamError("coarse coordinate outside its level")
        keys = morton_encode_array(coarse)
        if len(keys) > 1 and not np.all(keys[1:] > keys[:-1]):
            raise CorruptStreamError("coarse coordinates are not in Morton order")
        st = TreeState(m, coarse)
        for level in range(m, L):
            n = len(st.csets[level])
            source.begin_level(st, level, n)
            codes = source.decode_level(dec, n)
            st.add_codes(level, codes)
            if len(st.csets[level + 1]) > h.voxel_count:
                raise CorruptStreamError(f"level {level + 1} outgrows the declared voxel count")
        dec.check_end()
        coords = st.csets[L].coords
        if len(coords) != h.voxel_count:
            raise CorruptStreamError("decoded voxel count differs from the header")
    if _geometry_crc(coords) != h.geometry_crc:
        raise CorruptStreamError("decoded geometry fails its checksum")
    depth = max(1, int(coords.max()).bit_length()) if len(coords) else 1
    if h.quant.mode is QuantMode.BOX16:
        depth = h.quant.bit_depth
    return QuantizedCloud(coords, h.quant, depth, orig_count=h.orig_count)


def measure(qc: QuantizedCloud, model: Optional[ContextModel] = None) -> dict:
    """Bits-per-point report: totals, per-level coded and model bits."""
    r = encode(qc, model)
    n = max(qc.orig_count, 1)
    return {
        "points": qc.orig_count,
        "voxels": len(qc),
        "total_bits": r.total_bits,
        "header_bits": r.header_bits,
        "coarse_bits": r.coarse_bits,
        "ideal_bits": r.ideal_bits,
        "bpp": r.total_bits / n,
        "levels": [
            {"level": s.level, "symbols": s.symbols, "coded_bits": s.coded_bits,
             "model_bits": s.model_bits}
            for s in r.levels
        ],
    }
