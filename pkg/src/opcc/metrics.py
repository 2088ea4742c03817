"""Geometry distortion, Bjontegaard deltas and the sparsity profile.

Nearest neighbors come from a k-d tree, but every reported distance is
recomputed with ``_sqdist`` so the numbers equal a brute-force search that
uses the same expression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .octree import OctreeLevels, neighbor_counts
from .pcio import QuantConfig, QuantMode

__all__ = [
    "UndefinedMetricError",
    "InsufficientDataError",
    "PSNR_SENTINEL",
    "NORMAL_NEIGHBORS",
    "nearest_sqdist",
    "d1_mse",
    "d1_psnr",
    "estimate_normals",
    "d2_mse",
    "d2_psnr",
    "chamfer",
    "psnr_from_mse",
    "peak_value",
    "bd_rate",
    "bd_psnr",
    "bd_log_delta",
    "RDPoint",
    "evaluate_pair",
    "HRCSRow",
    "hrcs_profile",
]

PSNR_SENTINEL = 999.0
NORMAL_NEIGHBORS = 12
_CANDIDATES = 16


class UndefinedMetricError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


def _as_cloud(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise UndefinedMetricError("metric undefined for an empty cloud")
    return p


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest_sqdist(a, b) -> Tuple[np.ndarray, np.ndarray]:
    """For each point of ``a``: squared distance to, and index of, its
    nearest point in ``b``. Ties go to the lowest index of ``b``."""
    a, b = _as_cloud(a), _as_cloud(b)
    k = min(_CANDIDATES, len(b))
    _, idx = cKDTree(b).query(a, k=k)
    idx = idx.reshape(len(a), k)
    d = _sqdist(a[:, None, :], b[idx])
    best = d.min(axis=1)
    # smallest index among exact minima
    cand = np.where(d == best[:, None], idx, len(b))
    return best, cand.min(axis=1)


def psnr_from_mse(mse: float, peak: float) -> float:
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def d1_mse(a, b) -> float:
    """Symmetric point-to-point MSE: worse of the two directions."""
    ab, _ = nearest_sqdist(a, b)
    ba, _ = nearest_sqdist(b, a)
    return float(max(ab.mean(), ba.mean()))


def d1_psnr(a, b, peak: float) -> float:
    return psnr_from_mse(d1_mse(a, b), peak)


def _orient(normals: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Flip normals to face the origin; on a tie make the first nonzero
    component positive."""
    s = np.einsum("ij,ij->i", normals, -points)
    first = np.take_along_axis(normals, np.argmax(normals != 0, axis=1)[:, None], axis=1)[:, 0]
    flip = (s < 0) | ((s == 0) & (first < 0))
    return np.where(flip[:, None], -normals, normals)


def normals_from_neighborhoods(points: np.ndarray, nbr: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """PCA normal per row of ``nbr`` (indices into ``points``), plus a flag
    for neighborhoods of rank below 2."""
    patch = points[nbr]
    centered = patch - patch.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / nbr.shape[1]
    w, v = np.linalg.eigh(cov)
    normals = _orient(v[:, :, 0], points)
    scale = np.maximum(w[:, 2], np.finfo(np.float64).tiny)
    degenerate = w[:, 1] <= 1e-12 * scale
    return normals, degenerate


def estimate_normals(ref, k: int = NORMAL_NEIGHBORS) -> Tuple[np.ndarray, np.ndarray]:
    """Normals of ``ref`` from each point plus its ``k`` nearest neighbors."""
    ref = _as_cloud(ref)
    if len(ref) < k + 1:
        raise InsufficientDataError(f"normal estimation needs at least {k + 1} reference points")
    _, nbr = cKDTree(ref).query(ref, k=k + 1)
    return normals_from_neighborhoods(ref, nbr)


def _d2_direction(a: np.ndarray, b: np.ndarray, normals: np.ndarray, degenerate: np.ndarray):
    d1, j = nearest_sqdist(a, b)
    disp = a - b[j]
    n = normals[j]
    proj = disp[:, 0] * n[:, 0] + disp[:, 1] * n[:, 1] + disp[:, 2] * n[:, 2]
    err = np.where(degenerate[j], d1, proj * proj)
    return err, int(degenerate[j].sum())


def d2_mse(a, b, k: int = NORMAL_NEIGHBORS) -> Tuple[float, int]:
    """Symmetric point-to-plane MSE and the number of point-to-point
    fallbacks caused by rank-deficient neighborhoods."""
    a, b = _as_cloud(a), _as_cloud(b)
    nb, db = estimate_normals(b, k)
    na, da = estimate_normals(a, k)
    ab, fa = _d2_direction(a, b, nb, db)
    ba, fb = _d2_direction(b, a, na, da)
    return float(max(ab.mean(), ba.mean())), fa + fb


def d2_psnr(a, b, peak: float, k: int = NORMAL_NEIGHBORS) -> float:
    return psnr_from_mse(d2_mse(a, b, k)[0], peak)


def chamfer(a, b) -> float:
    ab, _ = nearest_sqdist(a, b)
    ba, _ = nearest_sqdist(b, a)
    return float(0.5 * (np.sqrt(ab).mean() + np.sqrt(ba).mean()))


def peak_value(cfg: QuantConfig, ref: Optional[np.ndarray] = None) -> float:
    """PSNR peak in meters.

    BOX16: the coded cube edge minus one voxel, ``(2^bits - 1) * voxel``.
    SCALE_POSQ: the largest per-axis extent of the reference cloud.
    """
    if cfg.mode is QuantMode.BOX16:
        return ((1 << cfg.bit_depth) - 1) * cfg.voxel_size
    if ref is None:
        raise UndefinedMetricError("SCALE_POSQ peak needs the reference cloud")
    ref = _as_cloud(ref)
    return float((ref.max(axis=0) - ref.min(axis=0)).max())


# --------------------------------------------------------------------------
# Bjontegaard deltas
# --------------------------------------------------------------------------

def _curve(curve) -> Tuple[np.ndarray, np.ndarray]:
    """``(bpp, psnr)`` pairs -> (log10 rate, psnr) sorted by psnr."""
    c = np.asarray(curve, dtype=np.float64).reshape(-1, 2)
    if len(c) < 4:
        raise InsufficientDataError("a BD curve needs at least 4 points")
    if np.any(c[:, 0] <= 0) or not np.all(np.isfinite(c)):
        raise UndefinedMetricError("BD curves need positive rates and finite PSNR")
    order = np.argsort(c[:, 1], kind="stable")
    return np.log10(c[order, 0]), c[order, 1]


def _avg_diff(x_ref, y_ref, x_test, y_test) -> float:
    """Mean of ``fit_test(x) - fit_ref(x)`` over the shared span of ``x``,
    with cubic fits of ``y`` against ``x``."""
    lo = max(x_ref.min(), x_test.min())
    hi = min(x_ref.max(), x_test.max())
    if not hi > lo:
        raise UndefinedMetricError("BD curves do not overlap")
    p_ref = np.polyint(np.polyfit(x_ref, y_ref, 3))
    p_test = np.polyint(np.polyfit(x_test, y_test, 3))
    area = (np.polyval(p_test, hi) - np.polyval(p_test, lo)) - (np.polyval(p_ref, hi) - np.polyval(p_ref, lo))
    return float(area / (hi - lo))


def bd_log_delta(curve_ref, curve_test) -> float:
    """Average log10-rate difference at equal PSNR (before exponentiation)."""
    lr_ref, q_ref = _curve(curve_ref)
    lr_test, q_test = _curve(curve_test)
    return _avg_diff(q_ref, lr_ref, q_test, lr_test)


def bd_rate(curve_ref, curve_test) -> float:
    """Percent rate change of ``curve_test`` against ``curve_ref``."""
    return (10.0 ** bd_log_delta(curve_ref, curve_test) - 1.0) * 100.0


def bd_psnr(curve_ref, curve_test) -> float:
    """Average PSNR gain (dB) of ``curve_test`` at equal rate."""
    lr_ref, q_ref = _curve(curve_ref)
    lr_test, q_test = _curve(curve_test)
    return _avg_diff(lr_ref, q_ref, lr_test, q_test)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass
class RDPoint:
    label: str
    bpp: float
    d1_psnr: float
    d2_psnr: float
    chamfer: float
    peak: float
    d2_fallbacks: int = 0

    def as_row(self) -> Dict[str, object]:
        cap = lambda v: PSNR_SENTINEL if math.isinf(v) else v  # noqa: E731
        return {"label": self.label, "bpp": self.bpp, "d1_psnr": cap(self.d1_psnr),
                "d2_psnr": cap(self.d2_psnr), "chamfer": self.chamfer, "peak": self.peak,
                "d2_fallbacks": self.d2_fallbacks, "normal_k": NORMAL_NEIGHBORS}


def evaluate_pair(ref, rec, peak: float, bpp: float, label: str = "") -> RDPoint:
    mse2, fb = d2_mse(ref, rec)
    return RDPoint(label, bpp, d1_psnr(ref, rec, peak), psnr_from_mse(mse2, peak),
                   chamfer(ref, rec), peak, fb)


@dataclass
class HRCSRow:
    level: int
    nodes: int
    mean_neighbors: float


def hrcs_profile(levels: OctreeLevels) -> List[HRCSRow]:
    """Node count and mean 26-neighbor occupancy at every level."""
    rows = []
    for lv in levels.levels:
        c = levels.coords[lv]
        mean = float(neighbor_counts(c).mean()) if len(c) else 0.0
        rows.append(HRCSRow(lv, len(c), mean))
    return rows
