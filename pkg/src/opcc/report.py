"""CSV/JSON emitters and matplotlib figures for RD and sparsity reports."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
# element ids in SVG output are otherwise drawn from a per-process random salt
matplotlib.rcParams["svg.hashsalt"] = "opcc"
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import PSNR_SENTINEL, HRCSRow  # noqa: E402

__all__ = ["to_csv", "to_json", "write_rd_report", "write_hrcs_report", "write_loss_log",
           "RD_FIELDS", "HRCS_FIELDS"]

RD_FIELDS = ["label", "bpp", "d1_psnr", "d2_psnr", "chamfer", "peak", "d2_fallbacks", "normal_k", "error"]
HRCS_FIELDS = ["level", "nodes", "mean_neighbors"]

# fixed metadata keeps figure bytes reproducible
_SVG_META = {"Date": None, "Creator": None}


def _clean(v):
    if isinstance(v, float):
        if math.isinf(v):
            return PSNR_SENTINEL if v > 0 else -PSNR_SENTINEL
        return float(repr(v)) if math.isfinite(v) else None
    return v


def to_csv(rows: Iterable[Mapping], fieldnames: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _clean(r.get(k, "")) for k in fieldnames})
    return buf.getvalue()


def to_json(obj) -> str:
    def walk(o):
        if isinstance(o, dict):
            return {k: walk(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [walk(v) for v in o]
        return _clean(o)
    return json.dumps(walk(obj), sort_keys=True, indent=2) + "\n"


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def write_rd_report(out_dir, rows: List[Dict], bd: Dict[str, Dict] = None, stem: str = "rd") -> List[Path]:
    """``rows`` are RD table rows (see ``RD_FIELDS``); curves are grouped by
    the part of ``label`` before ``@``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_p, json_p, fig_p = out / f"{stem}.csv", out / f"{stem}.json", out / f"{stem}.svg"
    csv_p.write_text(to_csv(rows, RD_FIELDS))
    json_p.write_text(to_json({"rows": rows, "bd": bd or {}}))

    curves: Dict[str, List] = {}
    for r in rows:
        if r.get("error"):
            continue
        curves.setdefault(str(r["label"]).split("@")[0], []).append((r["bpp"], _clean(r["d1_psnr"])))
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name in sorted(curves):
        pts = sorted(curves[name])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("bits per input point")
    ax.set_ylabel("D1 PSNR (dB)")
    ax.grid(alpha=0.3)
    if curves:
        ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, fig_p)
    return [csv_p, json_p, fig_p]


def write_hrcs_report(out_dir, rows: List[HRCSRow], stem: str = "hrcs") -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dicts = [{"level": r.level, "nodes": r.nodes, "mean_neighbors": r.mean_neighbors} for r in rows]
    csv_p, json_p, fig_p = out / f"{stem}.csv", out / f"{stem}.json", out / f"{stem}.svg"
    csv_p.write_text(to_csv(dicts, HRCS_FIELDS))
    json_p.write_text(to_json({"rows": dicts}))

    fig, ax1 = plt.subplots(figsize=(5, 3.6))
    lv = [r.level for r in rows]
    ax1.bar(lv, [r.nodes for r in rows], color="0.8", label="nodes")
    ax1.set_yscale("log")
    ax1.set_xlabel("octree level")
    ax1.set_ylabel("occupied nodes")
    ax2 = ax1.twinx()
    ax2.plot(lv, [r.mean_neighbors for r in rows], color="C3", marker="o")
    ax2.set_ylabel("mean occupied neighbors (of 26)", color="C3")
    ax2.set_ylim(0, max([r.mean_neighbors for r in rows] + [1.0]) * 1.1)
    fig.tight_layout()
    _save(fig, fig_p)
    return [csv_p, json_p, fig_p]


def write_loss_log(out_dir, losses: Sequence[float], start_step: int = 0, stem: str = "train") -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"step": start_step + i, "bits_per_symbol": v} for i, v in enumerate(losses)]
    csv_p, fig_p = out / f"{stem}_loss.csv", out / f"{stem}_loss.svg"
    csv_p.write_text(to_csv(rows, ["step", "bits_per_symbol"]))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([r["step"] for r in rows], losses, lw=0.8)
    ax.axhline(math.log2(255), color="0.5", ls="--", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("bits per occupancy code")
    fig.tight_layout()
    _save(fig, fig_p)
    return [csv_p, fig_p]
