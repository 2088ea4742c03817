"""Versioned little-endian checkpoint container.

Layout::

    b"OPCK" | u16 version | u32 index_len | index (UTF-8 JSON) | tensor data

The JSON index holds the model config, the training step, and for every
tensor its name, shape and byte offset into the data block. Tensors are raw
little-endian float32 (``step`` counters of the optimizer are float32 too).
Keys are sorted and no timestamps are written, so saving the same state
twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch

from .context import ContextConfig, ContextModel
from .errors import CorruptStreamError

__all__ = ["CKPT_MAGIC", "CKPT_VERSION", "Checkpoint", "model_checksum", "save_checkpoint",
           "load_checkpoint", "dump_checkpoint", "parse_checkpoint"]

CKPT_MAGIC = b"OPCK"
CKPT_VERSION = 1


def _canonical_config(cfg: ContextConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def model_checksum(model: ContextModel) -> bytes:
    """SHA-256 over the config and every parameter, in name order."""
    h = hashlib.sha256(_canonical_config(model.cfg))
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.digest()


@dataclass
class Checkpoint:
    model: ContextModel
    step: int = 0
    optimizer_state: Optional[dict] = None
    meta: Optional[dict] = None


def _opt_tensors(model: ContextModel, optimizer: torch.optim.Optimizer) -> Dict[str, torch.Tensor]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            for key, val in st.items():
                out[f"opt/{names[id(p)]}/{key}"] = torch.as_tensor(val, dtype=torch.float32).reshape(-1) \
                    if key == "step" else val
    return out


def dump_checkpoint(model: ContextModel, step: int = 0,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    meta: Optional[dict] = None) -> bytes:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update(_opt_tensors(model, optimizer))
        hyper = {k: v for k, v in optimizer.param_groups[0].items() if k != "params"}
        hyper = {k: list(v) if isinstance(v, tuple) else v for k, v in hyper.items()
                 if isinstance(v, (int, float, bool, tuple, type(None)))}
    else:
        hyper = None
    index = []
    blobs = []
    off = 0
    for name in sorted(tensors):
        arr = tensors[name].detach().to(torch.float32).contiguous().numpy().astype("<f4")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": off})
        blobs.append(raw)
        off += len(raw)
    head = {
        "config": model.cfg.to_dict(),
        "step": int(step),
        "optimizer": hyper,
        "meta": meta or {},
        "tensors": index,
        "checksum": model_checksum(model).hex(),
    }
    js = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    return CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(js)) + js + b"".join(blobs)


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != CKPT_MAGIC:
        raise CorruptStreamError("not a checkpoint file (bad magic)")
    if len(raw) < 10:
        raise CorruptStreamError("truncated checkpoint header")
    version, jlen = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise CorruptStreamError(f"unsupported checkpoint version {version}")
    try:
        head = json.loads(raw[10:10 + jlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptStreamError(f"unreadable checkpoint index: {e}") from None
    data = memoryview(raw)[10 + jlen:]
    tensors = {}
    for ent in head["tensors"]:
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        end = ent["offset"] + 4 * count
        if end > len(data):
            raise CorruptStreamError("truncated checkpoint tensor data")
        arr = np.frombuffer(data[ent["offset"]:end], dtype="<f4").reshape(ent["shape"])
        tensors[ent["name"]] = torch.from_numpy(arr.astype(np.float32))
    cfg = ContextConfig(**head["config"])
    model = ContextModel(cfg)
    sd = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    try:
        model.load_state_dict(sd, strict=True)
    except RuntimeError as e:
        raise CorruptStreamError(f"checkpoint tensors do not fit the config: {e}") from None
    if model_checksum(model).hex() != head["checksum"]:
        raise CorruptStreamError("checkpoint checksum mismatch")
    opt_state = None
    if head.get("optimizer") is not None:
        opt_state = {"hyper": head["optimizer"],
                     "tensors": {k[len("opt/"):]: v for k, v in tensors.items() if k.startswith("opt/")}}
    return Checkpoint(model, head["step"], opt_state, head.get("meta"))


def restore_optimizer(ckpt: Checkpoint, optimizer: torch.optim.Optimizer) -> None:
    """Load saved moments and step counts into a fresh optimizer over
    ``ckpt.model``'s parameters."""
    if ckpt.optimizer_state is None:
        return
    params = dict(ckpt.model.named_parameters())
    per: Dict[str, dict] = {}
    for key, val in ckpt.optimizer_state["tensors"].items():
        pname, field = key.rsplit("/", 1)
        per.setdefault(pname, {})[field] = val
    for pname, st in per.items():
        p = params[pname]
        state = {}
        for field, val in st.items():
            state[field] = val.reshape(()).clone() if field == "step" else val.clone()
        optimizer.state[p] = state


def save_checkpoint(path, model: ContextModel, step: int = 0,
                    optimizer: Optional[torch.optim.Optimizer] = None, meta: Optional[dict] = None) -> bytes:
    raw = dump_checkpoint(model, step, optimizer, meta)
    with open(path, "wb") as f:
        f.write(raw)
    return raw


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
