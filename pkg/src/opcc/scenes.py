"""Seeded synthetic scenes: planes, spheres and LiDAR-like ring scans.

All generators return float64 ``(N, 3)`` arrays in meters centered near the
origin, so they fit a ``QuantConfig`` box of ``box_size`` meters.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

__all__ = ["planes", "spheres", "ring_scan", "make_scene", "SCENE_KINDS"]

SCENE_KINDS = ("planes", "spheres", "ring_scan")


def planes(n_points: int = 4000, n_planes: int = 3, extent: float = 20.0,
           noise: float = 0.0, seed: int = 0) -> np.ndarray:
    """Points on randomly oriented rectangular patches."""
    rng = np.random.default_rng(seed)
    per = np.full(n_planes, n_points // n_planes)
    per[: n_points - per.sum()] += 1
    out = []
    for k in range(n_planes):
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        u = np.cross(normal, [1.0, 0.0, 0.0] if abs(normal[0]) < 0.9 else [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(normal, u)
        center = rng.uniform(-extent / 4, extent / 4, size=3)
        half = rng.uniform(extent / 6, extent / 3, size=2)
        ab = rng.uniform(-1, 1, size=(per[k], 2)) * half
        pts = center + ab[:, :1] * u + ab[:, 1:] * v
        if noise:
            pts += rng.normal(scale=noise, size=pts.shape) * normal
        out.append(pts)
    return np.concatenate(out) if out else np.zeros((0, 3))


def spheres(n_points: int = 4000, n_spheres: int = 3, extent: float = 20.0,
            noise: float = 0.0, seed: int = 0) -> np.ndarray:
    """Points on the surfaces of random spheres."""
    rng = np.random.default_rng(seed)
    per = np.full(n_spheres, n_points // n_spheres)
    per[: n_points - per.sum()] += 1
    out = []
    for k in range(n_spheres):
        center = rng.uniform(-extent / 4, extent / 4, size=3)
        radius = rng.uniform(extent / 12, extent / 5)
        d = rng.normal(size=(per[k], 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = radius + (rng.normal(scale=noise, size=(per[k], 1)) if noise else 0.0)
        out.append(center + d * r)
    return np.concatenate(out) if out else np.zeros((0, 3))


def _ray_boxes(o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Entry distance of each ray into each axis-aligned box, inf on a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo[None] - o) * inv[:, None]
        t1 = (hi[None] - o) * inv[:, None]
    near = np.nanmax(np.minimum(t0, t1), axis=2)
    far = np.nanmin(np.maximum(t0, t1), axis=2)
    hit = (near <= far) & (near > 1e-6)
    return np.where(hit, near, np.inf).min(axis=1) if lo.size else np.full(len(d), np.inf)


def _ray_cylinders(o: np.ndarray, d: np.ndarray, cyl: np.ndarray) -> np.ndarray:
    """Entry distance into vertical cylinders ``(cx, cy, radius, height)``."""
    if not len(cyl):
        return np.full(len(d), np.inf)
    dx, dy = d[:, 0:1], d[:, 1:2]
    ox = o[0] - cyl[None, :, 0]
    oy = o[1] - cyl[None, :, 1]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - cyl[None, :, 2] ** 2
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    z = o[2] + t * d[:, 2:3]
    ok = (disc >= 0) & (t > 1e-6) & (z >= 0) & (z <= cyl[None, :, 3])
    return np.where(ok, t, np.inf).min(axis=1)


def ring_scan(beams: int = 16, azimuth_steps: int = 360, sensor_height: float = 1.7,
              fov: Tuple[float, float] = (-24.8, 2.0), max_range: float = 60.0,
              n_boxes: int = 6, n_poles: int = 8, noise: float = 0.01,
              seed: int = 0) -> np.ndarray:
    """Spinning multi-beam scan of a ground plane with boxes and poles.

    Each beam sweeps a cone, so ground returns form concentric rings whose
    spacing grows with range, the way a real scanner's do.
    """
    rng = np.random.default_rng(seed)
    elev = np.deg2rad(np.linspace(fov[0], fov[1], beams))
    azim = np.linspace(0, 2 * np.pi, azimuth_steps, endpoint=False)
    azim = azim + rng.uniform(0, 2 * np.pi / azimuth_steps)
    el, az = np.meshgrid(elev, azim, indexing="ij")
    d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)
    o = np.array([0.0, 0.0, sensor_height])

    # obstacles placed away from the sensor
    ang = rng.uniform(0, 2 * np.pi, n_boxes)
    dist = rng.uniform(6, max_range * 0.6, n_boxes)
    size = rng.uniform([2, 2, 1.5], [8, 8, 6], size=(n_boxes, 3))
    cen = np.stack([dist * np.cos(ang), dist * np.sin(ang)], axis=1)
    lo = np.concatenate([cen - size[:, :2] / 2, np.zeros((n_boxes, 1))], axis=1)
    hi = np.concatenate([cen + size[:, :2] / 2, size[:, 2:]], axis=1)
    pang = rng.uniform(0, 2 * np.pi, n_poles)
    pdist = rng.uniform(4, max_range * 0.5, n_poles)
    cyl = np.stack([pdist * np.cos(pang), pdist * np.sin(pang),
                    rng.uniform(0.1, 0.4, n_poles), rng.uniform(3, 8, n_poles)], axis=1)

    with np.errstate(divide="ignore"):
        t_ground = np.where(d[:, 2] < 0, -sensor_height / d[:, 2], np.inf)
    t = np.minimum(t_ground, np.minimum(_ray_boxes(o, d, lo, hi), _ray_cylinders(o, d, cyl)))
    keep = t <= max_range
    t = t[keep]
    if noise:
        t = t + rng.normal(scale=noise, size=t.shape)
    return o + d[keep] * t[:, None]


def make_scene(kind: str, seed: int = 0, n_points: Optional[int] = None, **kw) -> np.ndarray:
    if kind == "planes":
        return planes(n_points or 4000, seed=seed, **kw)
    if kind == "spheres":
        return spheres(n_points or 4000, seed=seed, **kw)
    if kind == "ring_scan":
        return ring_scan(seed=seed, **kw)
    raise ValueError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
