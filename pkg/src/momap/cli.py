"""``momap`` command line.

Every subcommand prints one JSON summary on stdout; human-readable tables
go to stderr.  Exit codes: 0 success, 1 I/O or parse failure, 2 shape or
validation failure.  Settings resolve as flag > ``--config`` file >
built-in default, and the resolved values are echoed in the summary.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import compress as cz
from . import dsl as dsl_mod
from .core import Camera, FormatError, MomapError, read_momap, write_momap
from .infill import InfillConfig, infill
from .metrics import MetricConfig, evaluate_best_of_n
from .render import coverage, render, write_frames
from .synth import generate, moving_body_mask, scene_from_json

EXIT_OK, EXIT_IO, EXIT_INVALID = 0, 1, 2


class ParseFailure(Exception):
    """Input could not be parsed; maps to exit code 1."""


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseFailure(f"{path}: invalid JSON: {exc}") from exc


def _config(args) -> dict:
    return _load_json(args.config) if getattr(args, "config", None) else {}


def _resolve(flag, cfg: dict, key: str, default):
    if flag is not None:
        return flag
    return cfg.get(key, default)


def resolve_threads(flag: int | None, cfg: dict) -> int:
    n = flag
    if n is None:
        n = cfg.get("threads")
    if n is None:
        n = int(os.environ.get("MOMAP_THREADS", "0") or 0)
    return int(n) if int(n) > 0 else (os.cpu_count() or 1)


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")


def _sub(cfg: dict, section: str, fields) -> dict:
    """Config keys for one module: either nested under ``section`` or at top level."""
    src = cfg.get(section, cfg)
    return {k: src[k] for k in fields if k in src}


# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args)
    doc = _load_json(args.spec)
    try:
        spec = scene_from_json(doc)
    except (MomapError, ValueError) as exc:
        raise ParseFailure(f"{args.spec}: {exc}") from exc
    seed = _resolve(args.seed, cfg, "seed", spec.seed)
    if seed != spec.seed:
        from dataclasses import replace

        spec = replace(spec, seed=int(seed))
    m, seg, cam = generate(spec)
    nbytes = write_momap(m, args.out, seg, cam)
    _emit(
        {
            "out": str(args.out),
            "bytes": nbytes,
            "height": m.height,
            "width": m.width,
            "frames": m.frames,
            "bodies": len(spec.bodies),
            "foreground_fraction": float(moving_body_mask(spec).mean()),
            "config": {"seed": int(seed)},
        }
    )
    return EXIT_OK


def cmd_infill(args) -> int:
    cfg = _config(args)
    values = _sub(cfg, "infill", InfillConfig.__dataclass_fields__)
    for key in ("w_accel", "w_arap", "knn", "max_iters", "grad_tol", "step", "fg_threshold"):
        flag = getattr(args, key)
        if flag is not None:
            values[key] = flag
    icfg = InfillConfig.from_dict(values)
    m, seg, cam = read_momap(args.input)
    res = infill(m, icfg)
    write_momap(res.momap, args.out, seg, cam)
    _emit(
        {
            "out": str(args.out),
            "energy": res.energy,
            "iterations": res.iterations,
            "converged": res.converged,
            "filled_entries": int(np.count_nonzero(~m.valid & m.covered[:, :, None])),
            "config": icfg.to_dict(),
        }
    )
    return EXIT_OK


def cmd_compress(args) -> int:
    cfg = _config(args)
    channels = int(_resolve(args.channels, cfg, "channels", cz.DEFAULT_CHANNELS))
    m, _, _ = read_momap(args.input)
    c = cz.compress(m, channels)
    nbytes = cz.write_momapz(c, args.out)
    _emit(
        {
            "out": str(args.out),
            "bytes": nbytes,
            "channels": c.channels,
            "frames": m.frames,
            "rmse": cz.reconstruction_rmse(m, c),
            "ratio": cz.compression_ratio(c),
            "ratio_with_basis": cz.compression_ratio(c, include_basis=True),
            "config": {"channels": channels},
        }
    )
    return EXIT_OK


def cmd_decompress(args) -> int:
    cfg = _config(args)
    time_step = float(_resolve(args.time_step, cfg, "time_step", 1.0 / 3.0))
    c = cz.read_momapz(args.input)
    m = cz.decompress(c, time_step=time_step)
    nbytes = write_momap(m, args.out)
    summary = {"out": str(args.out), "bytes": nbytes, "height": m.height, "width": m.width, "frames": m.frames}
    if args.reference:
        ref, _, _ = read_momap(args.reference)
        summary["rmse"] = cz.reconstruction_rmse(ref, c)
    summary["config"] = {"time_step": time_step}
    _emit(summary)
    return EXIT_OK


def _camera_from_json(doc: dict, frames: int) -> tuple[Camera, tuple[int, int] | None]:
    if "rotations" in doc:
        cam = Camera(doc["fx"], doc["fy"], doc["cx"], doc["cy"], doc["rotations"], doc["translations"])
    else:
        cam = Camera.static(doc["fx"], doc["fy"], doc["cx"], doc["cy"], frames)
    size = (int(doc["height"]), int(doc["width"])) if "height" in doc and "width" in doc else None
    return cam, size


def cmd_render(args) -> int:
    cfg = _config(args)
    radius = float(_resolve(args.radius, cfg, "splat_radius", 1.0))
    m, seg, cam = read_momap(args.input)
    size = None
    cam_path = args.camera or cfg.get("camera")
    if cam_path:
        try:
            cam, size = _camera_from_json(_load_json(cam_path), m.frames)
        except (KeyError, TypeError) as exc:
            raise ParseFailure(f"{cam_path}: malformed camera: {exc!r}") from exc
    if cam is None:
        raise MomapError("no camera: the MoMap file carries none and --camera was not given")
    frames = render(m, seg, cam, radius, size)
    write_frames(frames, args.out)
    _emit({"out": str(args.out), "frames": len(frames), "coverage": coverage(frames), "config": {"splat_radius": radius}})
    return EXIT_OK


def cmd_dsl(args) -> int:
    cfg = _config(args)
    if args.dsl_cmd == "emit":
        eps = float(_resolve(args.eps, cfg, "eps", 0.02))
        m, seg, _ = read_momap(args.input)
        if seg is None:
            raise MomapError(f"{args.input} carries no segmentation")
        prog = dsl_mod.emit_dsl(m, seg, eps)
        text = dsl_mod.serialize(prog, indent=2)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        summary = dsl_mod.to_dict(prog)
        summary["config"] = {"eps": eps}
        _emit(summary)
        return EXIT_OK
    prog = dsl_mod.parse_dsl(Path(args.dsl).read_text(encoding="utf-8"), strict=not args.lenient)
    seg = None
    if args.seg:
        _, seg, _ = read_momap(args.seg)
        if seg is None:
            raise MomapError(f"{args.seg} carries no segmentation")
    if args.dsl_cmd == "check":
        if seg is not None:
            dsl_mod.check_against(prog, seg)
        _emit({"ok": True, "patches": len(prog.patches), "horizon": prog.horizon})
        return EXIT_OK
    # ground
    if seg is None:
        raise MomapError("dsl ground needs --seg")
    img = dsl_mod.ground_dsl(prog, seg)
    Path(args.out).write_bytes(img.astype(np.int8).tobytes())
    _emit({"out": str(args.out), "height": img.shape[0], "width": img.shape[1], "nonzero": int(np.count_nonzero(img))})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    mvalues = _sub(cfg, "metrics", MetricConfig.__dataclass_fields__)
    if args.fg_threshold is not None:
        mvalues["fg_threshold"] = args.fg_threshold
    mcfg = MetricConfig.from_dict(mvalues)
    threads = resolve_threads(args.threads, cfg)
    gt, seg, _ = read_momap(args.gt)
    cands = [read_momap(p)[0] for p in args.candidates]
    report = evaluate_best_of_n(gt, cands, seg, mcfg, threads=threads)
    out = report.to_dict()
    out["config"] = mcfg.to_dict()
    _emit(out)
    sys.stderr.write(report.table() + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker count, 0 = auto (fallback: $MOMAP_THREADS)")

    p = argparse.ArgumentParser(prog="momap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic scene")
    g.add_argument("spec", help="scene spec JSON")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("infill", parents=[common], help="fill occluded trajectory entries")
    f.add_argument("input")
    f.add_argument("--out", required=True)
    for name, typ in (("w-accel", float), ("w-arap", float), ("knn", int), ("max-iters", int),
                      ("grad-tol", float), ("step", float), ("fg-threshold", float)):
        f.add_argument(f"--{name}", type=typ)
    f.set_defaults(func=cmd_infill)

    c = sub.add_parser("compress", parents=[common], help="low-rank temporal compression")
    c.add_argument("input")
    c.add_argument("--out", required=True)
    c.add_argument("--channels", type=int)
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", parents=[common], help="expand a .momapz back to .momap")
    d.add_argument("input")
    d.add_argument("--out", required=True)
    d.add_argument("--time-step", type=float)
    d.add_argument("--reference", help="original .momap to report RMSE against")
    d.set_defaults(func=cmd_decompress)

    r = sub.add_parser("render", parents=[common], help="splat frames into a camera")
    r.add_argument("input")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--radius", type=float)
    r.add_argument("--camera", help="camera JSON (fx, fy, cx, cy, optional rotations/translations/height/width)")
    r.set_defaults(func=cmd_render)

    s = sub.add_parser("dsl", help="motion programs")
    ssub = s.add_subparsers(dest="dsl_cmd", required=True)
    se = ssub.add_parser("emit", parents=[common])
    se.add_argument("input")
    se.add_argument("--out")
    se.add_argument("--eps", type=float)
    sg = ssub.add_parser("ground", parents=[common])
    sg.add_argument("dsl")
    sg.add_argument("--seg", required=True, help=".momap carrying the segmentation")
    sg.add_argument("--out", required=True)
    sg.add_argument("--lenient", action="store_true")
    sc = ssub.add_parser("check", parents=[common])
    sc.add_argument("dsl")
    sc.add_argument("--seg")
    sc.add_argument("--lenient", action="store_true")
    for q in (se, sg, sc):
        q.set_defaults(func=cmd_dsl)
    se.set_defaults(lenient=False, seg=None)

    e = sub.add_parser("eval", parents=[common], help="best-of-N evaluation")
    e.add_argument("gt")
    e.add_argument("candidates", nargs="+")
    e.add_argument("--fg-threshold", type=float)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseFailure, FormatError, dsl_mod.DSLError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_IO
    except (MomapError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
