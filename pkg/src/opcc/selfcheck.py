"""Invariant suite behind ``opcc selfcheck``."""

from __future__ import annotations

import math
from typing import Callable, List, Tuple

import numpy as np
import torch

from . import codec
from .context import ContextConfig, ContextModel
from .entropy import RangeDecoder, RangeEncoder, quantize_distributions
from .gradcheck import run_trial
from .metrics import d1_psnr
from .octree import downsample, morton_encode_array, occupancy_codes, sort_dedup_morton, upsample_coords
from .pcio import QuantConfig, QuantMode, quantize
from .scenes import make_scene

Result = Tuple[str, bool, str]


def _coder(rng, trials: int) -> Tuple[bool, str]:
    worst = -math.inf
    for _ in range(trials):
        n = int(rng.integers(0, 400))
        probs = rng.dirichlet(np.full(255, 0.2), size=max(n, 1))
        freq = quantize_distributions(probs)
        cum = np.concatenate([np.zeros((len(freq), 1), np.int64), np.cumsum(freq, 1)], 1)
        sym = np.array([rng.choice(255, p=p) for p in probs[:n]], dtype=np.int64)
        enc = RangeEncoder()
        ideal = 0.0
        for i, s in enumerate(sym):
            enc.encode(int(cum[i, s]), int(freq[i, s]), 65536)
            ideal -= math.log2(freq[i, s] / 65536)
        data = enc.finish()
        dec = RangeDecoder(data)
        for i, s in enumerate(sym):
            v = dec.target(65536)
            j = int(np.searchsorted(cum[i], v, side="right")) - 1
            if j != s:
                return False, f"decoded {j} for {s}"
            dec.consume(int(cum[i, j]), int(freq[i, j]))
        dec.check_end()
        worst = max(worst, 8 * len(data) - ideal)
    return worst <= 32, f"max overhead {worst:.2f} bits"


def _octree(rng, trials: int) -> Tuple[bool, str]:
    for _ in range(trials):
        depth = int(rng.integers(1, 10))
        c = sort_dedup_morton(rng.integers(0, 1 << depth, size=(int(rng.integers(1, 300)), 3)), depth)
        p = downsample(c)
        codes = occupancy_codes(p, c)
        back = upsample_coords(p, codes)
        k = morton_encode_array(back)
        if not np.array_equal(back, c) or np.any(np.diff(k) <= 0):
            return False, f"identity broken at depth {depth}"
    return True, f"{trials} instances"


def _codec(rng, trials: int) -> Tuple[bool, str]:
    torch.manual_seed(0)
    model = ContextModel(ContextConfig(8, channel_width=4))
    for t in range(trials):
        pts = rng.uniform(-20, 20, size=(int(rng.integers(1, 800)), 3))
        quant = QuantConfig(bit_depth=int(rng.integers(8, 13))) if t % 2 else \
            QuantConfig(QuantMode.SCALE_POSQ, posq=512)
        qc = quantize(pts, quant)
        if not codec.decode(codec.encode(qc).data).same_coords(qc):
            return False, "frequency model round trip failed"
    qc = quantize(make_scene("planes", seed=1, n_points=1500), QuantConfig(box_size=64, bit_depth=8))
    r = codec.encode(qc, model)
    if not codec.decode(r.data, model).same_coords(qc):
        return False, "learned model round trip failed"
    return True, f"{trials} clouds + learned model"


def _grads(trials: int) -> Tuple[bool, str]:
    worst = 0.0
    for s in range(trials):
        worst = max(worst, max(run_trial(s).values()))
    return worst < 1e-3, f"max relative error {worst:.2e}"


def _metrics() -> Tuple[bool, str]:
    v = d1_psnr([[0, 0, 0]], [[1, 0, 0]], 1023)
    return abs(v - 64.97) < 0.01, f"worked D1 example {v:.3f} dB"


def run_selfcheck(quick: bool = True, seed: int = 0) -> List[Result]:
    rng = np.random.default_rng(seed)
    scale = 1 if quick else 10
    checks: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
        ("range coder lockstep and bound", lambda: _coder(rng, 20 * scale)),
        ("octree round trip and Morton order", lambda: _octree(rng, 200 * scale)),
        ("codec lossless round trip", lambda: _codec(rng, 6 * scale)),
        ("finite-difference gradients", lambda: _grads(2 * scale)),
        ("metric worked example", _metrics),
    ]
    out = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failed check, not a dead run
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append((name, ok, detail))
    return out
