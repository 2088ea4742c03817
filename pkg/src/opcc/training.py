"""Seeded training loop for the context models."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, dump_checkpoint, restore_optimizer
from .context import ContextConfig, ContextModel, TreeState, train_step
from .errors import NumericError
from .octree import build_levels
from .pcio import QuantConfig, quantize, read_cloud
from .scenes import make_scene
from .sparse_nn import make_adamw

__all__ = ["TrainConfig", "TrainResult", "scene_levels", "train", "load_train_config",
           "CONFIG_VERSION"]

log = logging.getLogger(__name__)
CONFIG_VERSION = 1


@dataclass
class TrainConfig:
    max_level: int = 12
    min_level: Optional[int] = None
    t_offset: int = 4
    channel_width: int = 16
    variant: str = "xfp"
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    max_grad_norm: float = 1.0
    batch_size: int = 1
    seed: int = 0
    scene: str = "ring_scan"
    box_size: float = 128.0
    # when non-empty, cycle over these files instead of generating scenes
    corpus: List[str] = field(default_factory=list)

    def context_config(self) -> ContextConfig:
        return ContextConfig(self.max_level, self.min_level, self.t_offset, self.channel_width, self.variant)

    def quant_config(self) -> QuantConfig:
        return QuantConfig(box_size=self.box_size, bit_depth=self.max_level)

    def to_json(self) -> str:
        return json.dumps({"version": CONFIG_VERSION, **asdict(self)}, sort_keys=True, indent=2)


def load_train_config(text: str) -> TrainConfig:
    raw = json.loads(text)
    version = raw.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ValueError(f"unsupported training config version {version}")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown training config keys: {sorted(unknown)}")
    return TrainConfig(**raw)


def scene_levels(kind: str, seed: int, qcfg: QuantConfig, max_level: int, min_level=None):
    pts = make_scene(kind, seed=seed)
    # scenes may reach past a small training box; drop what does not fit
    lo = np.asarray(qcfg.box_center) - qcfg.box_size / 2
    inside = np.all((pts >= lo) & (pts < lo + qcfg.box_size), axis=1)
    return build_levels(quantize(pts[inside], qcfg), max_level, min_level)


@dataclass
class TrainResult:
    model: ContextModel
    optimizer: torch.optim.Optimizer
    step: int
    losses: List[float]
    checkpoint: bytes
    aborted: Optional[str] = None


def _batch_source(cfg: TrainConfig) -> Callable[[int], Sequence[TreeState]]:
    ccfg = cfg.context_config()
    qcfg = cfg.quant_config()
    if cfg.corpus:
        trees = [TreeState.from_levels(build_levels(quantize(read_cloud(p), qcfg), ccfg.max_level,
                                                    ccfg.min_level)) for p in cfg.corpus]

        def from_corpus(step: int):
            return [trees[(step * cfg.batch_size + b) % len(trees)] for b in range(cfg.batch_size)]
        return from_corpus

    def generated(step: int):
        # every step sees fresh scenes, seeded by (run seed, step, slot)
        out = []
        for b in range(cfg.batch_size):
            s = int(np.random.SeedSequence([cfg.seed, step, b]).generate_state(1)[0])
            out.append(TreeState.from_levels(scene_levels(cfg.scene, s, qcfg, ccfg.max_level, ccfg.min_level)))
        return out
    return generated


def train(cfg: TrainConfig, resume: Optional[Checkpoint] = None,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps (counted from the resumed step).

    On a non-finite loss or gradient the run stops and the result carries
    the last good state.
    """
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    if resume is not None:
        model = resume.model
        if model.cfg != cfg.context_config():
            raise ValueError("resumed checkpoint does not match the training config")
        start = resume.step
    else:
        model = ContextModel(cfg.context_config())
        start = 0
    opt = make_adamw(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if resume is not None:
        restore_optimizer(resume, opt)
    batches = _batch_source(cfg)
    losses: List[float] = []
    aborted = None
    step = start
    for step in range(start, start + cfg.steps):
        try:
            r = train_step(model, batches(step), opt, cfg.max_grad_norm)
        except NumericError as e:
            aborted = f"step {step}: {e}"
            log.error("training diverged at %s", aborted)
            break
        losses.append(r.mean_bits)
        if on_step is not None:
            on_step(step, r.mean_bits)
    else:
        step = start + cfg.steps
    meta = {"train_config": json.loads(cfg.to_json())}
    return TrainResult(model, opt, step, losses, dump_checkpoint(model, step, opt, meta), aborted)
