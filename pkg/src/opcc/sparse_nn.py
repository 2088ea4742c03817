"""Sparse voxel feature maps and the network blocks built on them.

Features are torch tensors so reverse-mode gradients come from autograd; the
coordinate side (kernel maps, pruning masks) is plain numpy computed once per
coordinate set and shared by every map living on it.
"""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ContractViolation, NumericError
from .octree import morton_encode_array, neighbor_table, upsample_coords

__all__ = [
    "CoordSet",
    "SparseFeatureMap",
    "sparse_conv3",
    "linear",
    "prelu",
    "concat",
    "res_block",
    "oct_folding",
    "upsample_features",
    "predict_logits",
    "predict_head",
    "cross_entropy_loss",
    "backward",
    "clip_grad_norm",
    "make_adamw",
    "Conv3",
    "Linear",
    "PReLU",
    "ResBlock",
    "Upsample",
    "PredictionHead",
]

_CENTER = 13


class CoordSet:
    """Morton-sorted unique coordinates of one octree level plus lazily built
    neighbor structures."""

    def __init__(self, coords: np.ndarray, level: int):
        self.coords = np.ascontiguousarray(coords, dtype=np.int64).reshape(-1, 3)
        self.level = level
        self._kmap: Optional[List[Tuple[int, torch.Tensor, torch.Tensor]]] = None
        self._codes: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def morton(self) -> np.ndarray:
        if self._codes is None:
            self._codes = morton_encode_array(self.coords)
        return self._codes

    def kernel_map(self) -> List[Tuple[int, torch.Tensor, torch.Tensor]]:
        """(offset index, source rows, destination rows) for every non-center
        3x3x3 offset that has at least one occupied neighbor pair."""
        if self._kmap is None:
            table = neighbor_table(self.coords)
            kmap = []
            for o in range(27):
                if o == _CENTER:
                    continue
                dst = np.flatnonzero(table[:, o] >= 0)
                if len(dst):
                    kmap.append((o, torch.from_numpy(table[dst, o]), torch.from_numpy(dst)))
            self._kmap = kmap
        return self._kmap


class SparseFeatureMap:
    def __init__(self, cset: CoordSet, features: torch.Tensor):
        if features.dim() != 2 or features.shape[0] != len(cset):
            raise ContractViolation(
                f"feature rows {tuple(features.shape)} do not match {len(cset)} coordinates")
        self.cset = cset
        self.features = features

    @property
    def coords(self) -> np.ndarray:
        return self.cset.coords

    @property
    def level(self) -> int:
        return self.cset.level

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.cset)

    def with_features(self, features: torch.Tensor) -> "SparseFeatureMap":
        return SparseFeatureMap(self.cset, features)


# --------------------------------------------------------------------------
# Functional ops
# --------------------------------------------------------------------------

def sparse_conv3(fmap: SparseFeatureMap, kernel: torch.Tensor, bias: Optional[torch.Tensor]) -> SparseFeatureMap:
    """Submanifold 3x3x3 convolution; absent neighbors contribute zero.

    ``kernel[o]`` (shape ``C_in x C_out``) applies to the neighbor at offset
    ``NEIGHBOR_OFFSETS[o]``.
    """
    x = fmap.features
    if kernel.shape[0] != 27 or kernel.shape[1] != x.shape[1]:
        raise ContractViolation(
            f"kernel {tuple(kernel.shape)} incompatible with {x.shape[1]} input channels")
    out = x @ kernel[_CENTER]
    for o, src, dst in fmap.cset.kernel_map():
        out = out.index_add(0, dst, x.index_select(0, src) @ kernel[o])
    if bias is not None:
        out = out + bias
    return fmap.with_features(out)


def linear(fmap: SparseFeatureMap, weight: torch.Tensor, bias: Optional[torch.Tensor]) -> SparseFeatureMap:
    if weight.shape[0] != fmap.channels:
        raise ContractViolation(
            f"weight {tuple(weight.shape)} incompatible with {fmap.channels} channels")
    out = fmap.features @ weight
    if bias is not None:
        out = out + bias
    return fmap.with_features(out)


def _prelu(x: torch.Tensor, slopes: torch.Tensor) -> torch.Tensor:
    return torch.where(x >= 0, x, x * slopes)


def prelu(fmap: SparseFeatureMap, slopes: torch.Tensor) -> SparseFeatureMap:
    if slopes.shape != (fmap.channels,):
        raise ContractViolation("need one PReLU slope per channel")
    return fmap.with_features(_prelu(fmap.features, slopes))


def concat(a: SparseFeatureMap, b: SparseFeatureMap) -> SparseFeatureMap:
    if a.cset is not b.cset and not np.array_equal(a.coords, b.coords):
        raise ContractViolation("concat needs maps on the same coordinate set")
    return a.with_features(torch.cat([a.features, b.features], dim=1))


def oct_folding(node_coords: CoordSet, node_codes: np.ndarray, target: CoordSet,
                dtype: torch.dtype = torch.float32) -> SparseFeatureMap:
    """Embed the occupancy codes of ``node_coords`` into their ancestors at
    ``target.level``: one channel per relative descendant slot, value
    ``code / 255`` or 0 for unoccupied slots.

    The slot of a descendant is the low ``3 * depth`` bits of its Morton code,
    i.e. the child indices along the descent path, most significant first.
    """
    depth = node_coords.level - target.level
    if depth < 0:
        raise ContractViolation("fold target must not be deeper than the codes")
    codes = np.asarray(node_codes).reshape(-1)
    if len(codes) != len(node_coords):
        raise ContractViolation("need one occupancy code per folded node")
    desc = node_coords.morton
    anc = desc >> (3 * depth)
    slot = desc & ((1 << (3 * depth)) - 1)
    row = np.searchsorted(target.morton, anc)
    if len(anc) and (row.max() >= len(target) or np.any(target.morton[row] != anc)):
        raise ContractViolation("fold target is not the ancestor set of the codes")
    width = 1 << (3 * depth)
    g = np.zeros((len(target), width), dtype=np.float64)
    g[row, slot] = codes / 255.0
    return SparseFeatureMap(target, torch.from_numpy(g).to(dtype))


def upsample_features(fmap: SparseFeatureMap, codes: np.ndarray, weight: torch.Tensor,
                      bias: Optional[torch.Tensor], slopes: torch.Tensor,
                      child: Optional[CoordSet] = None) -> SparseFeatureMap:
    """Linear + PReLU to ``8 * C_out`` channels, then keep slot ``b`` of node
    ``i`` iff bit ``b`` of ``codes[i]`` is set.

    ``child`` may pass in the already known child coordinate set so its kernel
    map is shared; otherwise it is rebuilt from the codes.
    """
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    if len(codes) != len(fmap):
        raise ContractViolation("need one occupancy code per node")
    if len(codes) and codes.min() < 1:
        raise ContractViolation("occupancy code 0 cannot be upsampled")
    if weight.shape[1] % 8:
        raise ContractViolation("upsampling weight must produce 8 child slots")
    width = weight.shape[1] // 8
    y = fmap.features @ weight
    if bias is not None:
        y = y + bias
    y = _prelu(y, slopes)
    mask = ((codes[:, None] >> np.arange(8)) & 1).astype(bool)
    y = y.reshape(len(codes), 8, width)[torch.from_numpy(mask)]
    if child is None:
        child = CoordSet(upsample_coords(fmap.coords, codes), fmap.level + 1)
    elif len(child) != len(y):
        raise ContractViolation("child coordinate set does not match the codes")
    return SparseFeatureMap(child, y)


def predict_logits(fmap: SparseFeatureMap, w1, b1, slopes, w2, b2) -> torch.Tensor:
    h = _prelu(fmap.features @ w1 + b1, slopes)
    logits = h @ w2 + b2
    return logits


def predict_head(fmap: SparseFeatureMap, w1, b1, slopes, w2, b2) -> torch.Tensor:
    """Per-node distribution over occupancy codes 1..255 (column ``s - 1``)."""
    logits = predict_logits(fmap, w1, b1, slopes, w2, b2)
    if not torch.isfinite(logits).all():
        raise NumericError("prediction head produced non-finite logits")
    return torch.softmax(logits, dim=1)


def cross_entropy_loss(logits: torch.Tensor, truth: np.ndarray, reduction: str = "mean") -> torch.Tensor:
    """Negative log-likelihood in nats of the true codes (values 1..255)."""
    t = torch.as_tensor(np.asarray(truth, dtype=np.int64).reshape(-1))
    if t.shape[0] != logits.shape[0]:
        raise ContractViolation("one true code per predicted row is required")
    if len(t) and (t.min() < 1 or t.max() > 255):
        raise ContractViolation("true occupancy codes must lie in 1..255")
    return nn.functional.cross_entropy(logits, t - 1, reduction=reduction)


def backward(loss: torch.Tensor) -> None:
    """Accumulate reverse-mode gradients into every parameter's ``.grad``."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise ContractViolation("backward needs the output of a recorded forward pass")
    loss.backward()


def clip_grad_norm(params, max_norm: float = 1.0) -> float:
    """Rescale all gradients jointly so their global L2 norm is at most
    ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    with torch.no_grad():
        norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))
        if norm > max_norm:
            # exact rescale; the library helper adds a small epsilon
            for g in grads:
                g.mul_(max_norm / norm)
    return norm


def make_adamw(params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-4) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


# --------------------------------------------------------------------------
# Parameterized blocks
# --------------------------------------------------------------------------

def _uniform(shape, fan_in: int) -> nn.Parameter:
    bound = math.sqrt(1.0 / fan_in)
    return nn.Parameter(torch.empty(shape).uniform_(-bound, bound))


class Conv3(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = _uniform((27, c_in, c_out), 27 * c_in)
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, fmap: SparseFeatureMap) -> SparseFeatureMap:
        return sparse_conv3(fmap, self.weight, self.bias)


class Linear(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = _uniform((c_in, c_out), c_in)
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, fmap: SparseFeatureMap) -> SparseFeatureMap:
        return linear(fmap, self.weight, self.bias)


class PReLU(nn.Module):
    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.weight = nn.Parameter(torch.full((channels,), init))

    def forward(self, fmap: SparseFeatureMap) -> SparseFeatureMap:
        return prelu(fmap, self.weight)


def res_block(fmap: SparseFeatureMap, conv1: Conv3, act: PReLU, conv2: Conv3,
              proj: Optional[Linear] = None) -> SparseFeatureMap:
    """``proj(x) + conv2(prelu(conv1(x)))``; ``proj`` is identity when absent."""
    branch = conv2(act(conv1(fmap)))
    skip = proj(fmap) if proj is not None else fmap
    if skip.channels != branch.channels:
        raise ContractViolation("residual branch and skip path widths differ")
    return branch.with_features(skip.features + branch.features)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = Conv3(c_in, c_out)
        self.act = PReLU(c_out)
        self.conv2 = Conv3(c_out, c_out)
        self.proj = Linear(c_in, c_out) if c_in != c_out else None

    def forward(self, fmap: SparseFeatureMap) -> SparseFeatureMap:
        return res_block(fmap, self.conv1, self.act, self.conv2, self.proj)


class Upsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = _uniform((c_in, 8 * c_out), c_in)
        self.bias = nn.Parameter(torch.zeros(8 * c_out))
        self.slopes = nn.Parameter(torch.full((8 * c_out,), 0.25))

    def forward(self, fmap: SparseFeatureMap, codes: np.ndarray,
                child: Optional[CoordSet] = None) -> SparseFeatureMap:
        return upsample_features(fmap, codes, self.weight, self.bias, self.slopes, child)


class PredictionHead(nn.Module):
    def __init__(self, channels: int, symbols: int = 255):
        super().__init__()
        self.fc1 = Linear(channels, channels)
        self.act = PReLU(channels)
        self.fc2 = Linear(channels, symbols)

    def logits(self, fmap: SparseFeatureMap) -> torch.Tensor:
        return predict_logits(fmap, self.fc1.weight, self.fc1.bias, self.act.weight,
                              self.fc2.weight, self.fc2.bias)

    def forward(self, fmap: SparseFeatureMap) -> torch.Tensor:
        return predict_head(fmap, self.fc1.weight, self.fc1.bias, self.act.weight,
                            self.fc2.weight, self.fc2.bias)
