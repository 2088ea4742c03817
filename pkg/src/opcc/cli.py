"""Command-line front end.

Exit codes: 0 success, 1 usage or invalid configuration, 2 I/O or
unreadable input file, 3 corrupt stream or model mismatch, 4 numeric
failure (including a failed self-check).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import codec, metrics
from .checkpoint import load_checkpoint
from .errors import ContractViolation, CorruptStreamError, ModelMismatchError, NumericError
from .octree import build_levels
from .pcio import (
    MalformedFileError,
    OutOfRangeError,
    QuantConfig,
    QuantMode,
    UnsupportedLayoutError,
    dequantize,
    quantize,
    read_cloud,
    write_kitti_bin,
    write_ply,
)
from .report import to_json, write_hrcs_report, write_loss_log, write_rd_report
from .scenes import SCENE_KINDS, make_scene

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CORRUPT, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _center(text: str):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("center must be x,y,z") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("center must be x,y,z")
    return vals


def _add_quant(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("quantization")
    g.add_argument("--quant-mode", choices=[m.value for m in QuantMode], default="box16")
    g.add_argument("--bits", type=int, default=12, help="octree depth in box16 mode (1..16)")
    g.add_argument("--box", type=float, default=400.0, help="box edge in meters (box16)")
    g.add_argument("--center", type=_center, default=(0.0, 0.0, 0.0), help="box center x,y,z")
    g.add_argument("--scale", type=float, default=10000.0, help="global scale (scale_posq)")
    g.add_argument("--posq", type=int, default=8, help="posQ step (scale_posq)")


def _quant(args) -> QuantConfig:
    return QuantConfig(QuantMode(args.quant_mode), box_size=args.box, box_center=args.center,
                       bit_depth=args.bits, global_scale=args.scale, posq=args.posq)


def _load_points(path: str) -> np.ndarray:
    return read_cloud(path)


def _model(args):
    if getattr(args, "model", "ckpt") == "freq":
        return None
    if not args.ckpt:
        raise UsageError("--ckpt is required unless --model freq is given")
    return load_checkpoint(args.ckpt).model


def cmd_encode(args) -> int:
    quant = _quant(args)
    qc = quantize(_load_points(args.input), quant)
    model = _model(args)
    r = codec.encode(qc, model)
    Path(args.output).write_bytes(r.data)
    report = {
        "input": args.input, "points": qc.orig_count, "voxels": len(qc),
        "bytes": len(r.data), "bpp": r.bpp, "header_bits": r.header_bits,
        "coarse_bits": r.coarse_bits, "ideal_bits": r.ideal_bits,
        "levels": [{"level": s.level, "symbols": s.symbols, "coded_bits": s.coded_bits,
                    "model_bits": s.model_bits} for s in r.levels],
        "model": "freq" if model is None else model.cfg.variant,
    }
    if args.report:
        Path(args.report).write_text(to_json(report))
    print(f"{args.output}: {qc.orig_count} points, {len(r.data)} bytes, {r.bpp:.4f} bpp, "
          f"{r.seconds:.2f} s")
    return EXIT_OK


def cmd_decode(args) -> int:
    data = Path(args.input).read_bytes()
    h = codec.read_header(data)
    model = None
    if h.model_kind == codec.MODEL_LEARNED:
        if not args.ckpt:
            raise ModelMismatchError("stream needs a checkpoint (--ckpt)")
        model = load_checkpoint(args.ckpt).model
    t0 = time.perf_counter()
    qc = codec.decode(data, model)
    dt = time.perf_counter() - t0
    out = Path(args.output)
    if args.voxels:
        raw = write_ply(qc.coords, binary=True, dtype="int")
    elif out.suffix.lower() == ".bin":
        raw = write_kitti_bin(dequantize(qc))
    else:
        raw = write_ply(dequantize(qc), binary=True, dtype="double")
    out.write_bytes(raw)
    bpp = 8 * len(data) / qc.orig_count if qc.orig_count else 0.0
    print(f"{args.output}: {len(qc)} voxels, {bpp:.4f} bpp, {dt:.2f} s")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, load_train_config, train

    cfg = load_train_config(Path(args.config).read_text()) if args.config else TrainConfig()
    for key in ("steps", "seed", "variant", "lr", "max_level", "t_offset", "batch_size", "scene",
                "box_size"):
        v = getattr(args, key)
        if v is not None:
            setattr(cfg, key, v)
    if args.width is not None:
        cfg.channel_width = args.width
    if args.corpus:
        cfg.corpus = list(args.corpus)
    resume = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(cfg.to_json() + "\n")

    def progress(step, bits):
        if args.log_every and (step + 1) % args.log_every == 0:
            print(f"step {step + 1}: {bits:.4f} bits/code", flush=True)

    res = train(cfg, resume, progress)
    (out / "model.ckpt").write_bytes(res.checkpoint)
    start = resume.step if resume else 0
    write_loss_log(out, res.losses, start)
    if res.aborted:
        print(f"training aborted at {res.aborted}; last good checkpoint saved", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{out / 'model.ckpt'}: step {res.step}, final {res.losses[-1] if res.losses else float('nan'):.4f} bits/code")
    return EXIT_OK


def _parse_stream(entry: str):
    # label=stream[:checkpoint]
    if "=" not in entry:
        raise UsageError(f"stream argument {entry!r} must look like label=path[:ckpt]")
    label, rest = entry.split("=", 1)
    path, _, ckpt = rest.partition(":")
    return label, path, ckpt or None


def cmd_eval(args) -> int:
    ref = _load_points(args.ref)
    rows = []
    curves = {}
    hard_fail = False
    for entry in args.stream:
        label, path, ckpt = _parse_stream(entry)
        row = {"label": label}
        try:
            data = Path(path).read_bytes()
            h = codec.read_header(data)
            model = None
            if h.model_kind == codec.MODEL_LEARNED:
                ck = ckpt or args.ckpt
                if not ck:
                    raise ModelMismatchError(f"{label}: learned stream without a checkpoint")
                model = load_checkpoint(ck).model
            qc = codec.decode(data, model)
            rec = dequantize(qc)
            peak = args.peak if args.peak else metrics.peak_value(qc.config, ref)
            bpp = 8 * len(data) / max(qc.orig_count, 1)
            row.update(metrics.evaluate_pair(ref, rec, peak, bpp, label).as_row())
        except (metrics.UndefinedMetricError, metrics.InsufficientDataError) as e:
            row["error"] = str(e)
        except (CorruptStreamError, ModelMismatchError, OSError) as e:
            row["error"] = str(e)
            hard_fail = True
        rows.append(row)
        if not row.get("error"):
            curves.setdefault(label.split("@")[0], []).append((row["bpp"], row["d1_psnr"]))
    bd = {}
    if args.anchor and args.anchor in curves:
        for name, pts in sorted(curves.items()):
            if name == args.anchor:
                continue
            try:
                bd[name] = {"bd_rate_percent": metrics.bd_rate(curves[args.anchor], pts),
                            "bd_psnr_db": metrics.bd_psnr(curves[args.anchor], pts)}
            except (metrics.UndefinedMetricError, metrics.InsufficientDataError) as e:
                bd[name] = {"error": str(e)}
    paths = write_rd_report(args.out_dir, rows, bd)
    for r in rows:
        if r.get("error"):
            print(f"{r['label']}: error: {r['error']}")
        else:
            print(f"{r['label']}: {r['bpp']:.4f} bpp, D1 {r['d1_psnr']:.3f} dB, "
                  f"D2 {r['d2_psnr']:.3f} dB, chamfer {r['chamfer']:.6g} m")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_CORRUPT if hard_fail else EXIT_OK


def cmd_profile(args) -> int:
    quant = _quant(args)
    if args.input:
        pts = _load_points(args.input)
    else:
        pts = make_scene(args.scene, seed=args.seed)
    qc = quantize(pts, quant)
    depth = args.levels or qc.effective_depth
    prof = metrics.hrcs_profile(build_levels(qc, depth, 0))
    paths = write_hrcs_report(args.out_dir, prof)
    for r in prof:
        print(f"level {r.level:2d}: {r.nodes:8d} nodes, {r.mean_neighbors:6.3f} neighbors")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_scene(args) -> int:
    pts = make_scene(args.kind, seed=args.seed)
    out = Path(args.output)
    out.write_bytes(write_kitti_bin(pts) if out.suffix.lower() == ".bin" else write_ply(pts))
    print(f"{out}: {len(pts)} points")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    results = run_selfcheck(quick=not args.full)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}{': ' + detail if detail else ''}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="opcc", description="Learned octree geometry codec for LiDAR point clouds.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("encode", help="quantize and code a .bin/.ply cloud")
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True)
    e.add_argument("--model", choices=["freq", "ckpt"], default="ckpt",
                   help="'freq' codes with the adaptive frequency baseline")
    e.add_argument("--ckpt")
    e.add_argument("--report", help="write a JSON bit report here")
    _add_quant(e)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a stream to .ply (or KITTI .bin)")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--ckpt")
    d.add_argument("--voxels", action="store_true", help="write integer voxel coordinates")
    d.set_defaults(func=cmd_decode)

    t = sub.add_parser("train", help="train a context model")
    t.add_argument("--config", help="JSON training config")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=["xfp", "gred"])
    t.add_argument("--width", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--max-level", type=int)
    t.add_argument("--t-offset", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--scene", choices=SCENE_KINDS)
    t.add_argument("--box-size", type=float)
    t.add_argument("--corpus", nargs="*", help="train on these files instead of synthetic scenes")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="RD table and BD deltas for coded streams")
    v.add_argument("--ref", required=True, help="reference cloud")
    v.add_argument("--stream", nargs="+", required=True, help="label=path[:ckpt]; label 'name@x' groups curves")
    v.add_argument("--ckpt", help="default checkpoint for learned streams")
    v.add_argument("--anchor", help="curve name the BD deltas are measured against")
    v.add_argument("--peak", type=float, help="override the PSNR peak (meters)")
    v.add_argument("--out-dir", required=True)
    v.set_defaults(func=cmd_eval)

    f = sub.add_parser("profile", help="per-level node counts and neighbor occupancy")
    src = f.add_mutually_exclusive_group(required=True)
    src.add_argument("--input")
    src.add_argument("--scene", choices=SCENE_KINDS)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--levels", type=int, help="max octree level (default: quantized depth)")
    f.add_argument("--out-dir", required=True)
    _add_quant(f)
    f.set_defaults(func=cmd_profile)

    s = sub.add_parser("scene", help="write a synthetic scene")
    s.add_argument("--kind", choices=SCENE_KINDS, default="ring_scan")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_scene)

    c = sub.add_parser("selfcheck", help="run the invariant suite")
    c.add_argument("--full", action="store_true", help="larger sample counts")
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"opcc: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CorruptStreamError, ModelMismatchError) as e:
        print(f"opcc: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except (OSError, MalformedFileError, UnsupportedLayoutError) as e:
        print(f"opcc: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"opcc: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OutOfRangeError, ContractViolation, ValueError) as e:
        print(f"opcc: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
