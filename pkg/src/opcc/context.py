"""Learned occupancy context models.

Level convention: ``X^l`` denotes the occupancy codes carried by the level
``l`` nodes (they describe level ``l + 1``), and ``F^l`` is a feature map on
the level ``l`` nodes. The distribution for ``X^l`` is predicted from
``F^l``. In ``OctreeLevels`` terms ``X^l`` is ``levels.codes[l + 1]``.

Two variants share the prediction heads:

``xfp``
    Shallow levels (``l <= t``) propagate ``F^{l-1}`` through a ResBlock and
    an occupancy-pruned upsample. Deep levels (``l > t``) fold ``X^{l-1}``
    into level ``t``, fuse it with ``F^t`` and re-sparsify back to level
    ``l``.

``gred``
    No feature is carried across levels. Every level folds ``X^{l-1}`` into
    level ``min(t, l - 1)``, extracts features there and re-sparsifies.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ContractViolation, NumericError
from .octree import OctreeLevels, default_min_level, upsample_coords
from .sparse_nn import (
    CoordSet,
    PredictionHead,
    ResBlock,
    SparseFeatureMap,
    Upsample,
    clip_grad_norm,
    concat,
    cross_entropy_loss,
    oct_folding,
)

__all__ = [
    "VARIANTS",
    "ContextConfig",
    "TreeState",
    "ContextModel",
    "TrainStepResult",
    "train_step",
    "UNIFORM_BITS",
]

VARIANTS = ("xfp", "gred")
UNIFORM_BITS = math.log2(255)
LOG2E = 1.0 / math.log(2.0)


@dataclass(frozen=True)
class ContextConfig:
    max_level: int
    min_level: Optional[int] = None
    t_offset: int = 4
    channel_width: int = 32
    variant: str = "xfp"

    def __post_init__(self):
        if self.min_level is None:
            object.__setattr__(self, "min_level", default_min_level(self.max_level))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.t_offset < 1:
            raise ValueError("t_offset must be at least 1")
        if not self.min_level < self.decision_level < self.max_level:
            raise ValueError(
                f"need min_level < t < max_level, got {self.min_level} < "
                f"{self.decision_level} < {self.max_level}")
        if self.channel_width < 1:
            raise ValueError("channel_width must be positive")

    @property
    def decision_level(self) -> int:
        return self.max_level - self.t_offset

    @property
    def coded_levels(self) -> range:
        """Node levels whose occupancy codes are predicted."""
        return range(self.min_level, self.max_level)

    def to_dict(self) -> dict:
        return asdict(self)


class TreeState:
    """Coordinates and codes known so far, plus cached propagation features.

    The encoder fills it from a complete ``OctreeLevels``; the decoder grows it
    one level at a time as codes are decoded.
    """

    def __init__(self, min_level: int, coarse_coords: np.ndarray):
        self.min_level = min_level
        self.csets: Dict[int, CoordSet] = {min_level: CoordSet(coarse_coords, min_level)}
        self.codes: Dict[int, np.ndarray] = {}
        self.features: Dict[int, SparseFeatureMap] = {}

    @classmethod
    def from_levels(cls, levels: OctreeLevels) -> "TreeState":
        st = cls(levels.min_level, levels.coords[levels.min_level])
        for lv in range(levels.min_level + 1, levels.max_level + 1):
            st.csets[lv] = CoordSet(levels.coords[lv], lv)
            st.codes[lv - 1] = levels.codes[lv]
        return st

    def add_codes(self, level: int, codes: np.ndarray) -> None:
        """Record decoded ``X^level`` and derive the next level's coordinates."""
        codes = np.asarray(codes, dtype=np.int64)
        self.codes[level] = codes
        if level + 1 not in self.csets:
            kids = upsample_coords(self.csets[level].coords, codes)
            self.csets[level + 1] = CoordSet(kids, level + 1)

    def reset_features(self) -> None:
        self.features.clear()


class ContextModel(nn.Module):
    def __init__(self, cfg: ContextConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channel_width
        m, t, top = cfg.min_level, cfg.decision_level, cfg.max_level
        self.init = ResBlock(1, c)
        self.heads = nn.ModuleDict({str(l): PredictionHead(c) for l in cfg.coded_levels})
        self.blocks = nn.ModuleDict()
        for l in range(m + 1, top):
            if cfg.variant == "xfp" and l <= t:
                self.blocks[f"s{l}"] = ResBlock(c, c)
                self.blocks[f"s{l}_up"] = Upsample(c + 1, c)
                continue
            base = t if cfg.variant == "xfp" else min(t, l - 1)
            fold_ch = 8 ** (l - 1 - base)
            fuse_in = fold_ch + (c if cfg.variant == "xfp" else 0)
            self.blocks[f"d{l}_fuse"] = ResBlock(fuse_in, c)
            for k in range(base, l):
                if k > base:
                    self.blocks[f"d{l}_r{k}"] = ResBlock(c, c)
                self.blocks[f"d{l}_u{k}"] = Upsample(c + 1, c)

    @property
    def dtype(self) -> torch.dtype:
        return self.init.conv1.weight.dtype

    def _embed(self, codes: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.asarray(codes, dtype=np.float64)[:, None] / 255.0).to(self.dtype)

    def _lift(self, fmap: SparseFeatureMap, up: Upsample, codes: np.ndarray, child: CoordSet) -> SparseFeatureMap:
        """``Pruning(Upsampling(Concat(fmap, X)), X)`` onto ``child``."""
        x = fmap.with_features(torch.cat([fmap.features, self._embed(codes)], dim=1))
        return up(x, codes, child)

    def features_for(self, st: TreeState, level: int) -> SparseFeatureMap:
        """Feature map on the level-``level`` nodes; needs ``X`` of every
        shallower level in ``st``."""
        cfg = self.cfg
        m, t = cfg.min_level, cfg.decision_level
        if level not in self.heads_levels:
            raise ContractViolation(f"level {level} is not a coded level")
        for k in range(m, level):
            if k not in st.codes:
                raise ContractViolation(f"occupancy codes of level {k} are not available yet")
        if level == m:
            cs = st.csets[m]
            ones = torch.ones((len(cs), 1), dtype=self.dtype)
            f = self.init(SparseFeatureMap(cs, ones))
            st.features[m] = f
            return f
        if cfg.variant == "xfp" and level <= t:
            prev = st.features.get(level - 1)
            if prev is None:
                prev = self.features_for(st, level - 1)
            s = self.blocks[f"s{level}"](prev)
            f = self._lift(s, self.blocks[f"s{level}_up"], st.codes[level - 1], st.csets[level])
            st.features[level] = f
            return f
        base = t if cfg.variant == "xfp" else min(t, level - 1)
        g = oct_folding(st.csets[level - 1], st.codes[level - 1], st.csets[base], dtype=self.dtype)
        if cfg.variant == "xfp":
            ft = st.features.get(t)
            if ft is None:
                ft = self.features_for(st, t)
            g = concat(ft, g)
        h = self.blocks[f"d{level}_fuse"](g)
        f = self._lift(h, self.blocks[f"d{level}_u{base}"], st.codes[base], st.csets[base + 1])
        for k in range(base + 1, level):
            h = self.blocks[f"d{level}_r{k}"](f)
            f = self._lift(h, self.blocks[f"d{level}_u{k}"], st.codes[k], st.csets[k + 1])
        return f

    @property
    def heads_levels(self) -> range:
        return self.cfg.coded_levels

    def level_logits(self, st: TreeState, level: int) -> torch.Tensor:
        f = self.features_for(st, level)
        return self.heads[str(level)].logits(f)

    def predict_level(self, st: TreeState, level: int) -> torch.Tensor:
        """255-way distribution per level-``level`` node (column ``s - 1``)."""
        logits = self.level_logits(st, level)
        # any nan or +-inf entry makes its row sum non-finite
        if not torch.isfinite(logits.sum(dim=1)).all():
            raise NumericError(f"non-finite logits at level {level}")
        return torch.softmax(logits, dim=1)

    def forward(self, st: TreeState) -> Dict[int, torch.Tensor]:
        """Logits for every coded level of a fully known tree."""
        st.reset_features()
        return {l: self.level_logits(st, l) for l in self.cfg.coded_levels}

    def level_losses(self, st: TreeState):
        """Per-level summed cross-entropy in nats and node counts."""
        logits = self(st)
        sums = {l: cross_entropy_loss(z, st.codes[l], reduction="sum") for l, z in logits.items()}
        counts = {l: len(st.codes[l]) for l in logits}
        return sums, counts


@dataclass
class TrainStepResult:
    mean_bits: float
    level_bits: Dict[int, float]
    grad_norm: float


def train_step(model: ContextModel, batch: Sequence[TreeState], optimizer: torch.optim.Optimizer,
               max_norm: float = 1.0) -> TrainStepResult:
    """One optimizer step on the node-averaged cross-entropy of ``batch``.

    Returned losses are those of the forward pass before the update.
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total = None
    nodes = 0
    per_level: Dict[int, List[float]] = {}
    for st in batch:
        sums, counts = model.level_losses(st)
        for l, s in sums.items():
            acc = per_level.setdefault(l, [0.0, 0])
            acc[0] += float(s.detach())
            acc[1] += counts[l]
            total = s if total is None else total + s
            nodes += counts[l]
    loss = total / max(nodes, 1)
    if not torch.isfinite(loss):
        raise NumericError("training loss is not finite")
    loss.backward()
    norm = clip_grad_norm(model.parameters(), max_norm)
    if not math.isfinite(norm):
        optimizer.zero_grad(set_to_none=True)
        raise NumericError("gradient norm is not finite")
    optimizer.step()
    level_bits = {l: v[0] / max(v[1], 1) * LOG2E for l, v in sorted(per_level.items())}
    return TrainStepResult(float(loss.detach()) * LOG2E, level_bits, norm)
