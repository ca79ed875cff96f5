"""``nmedia`` command line: data generation, tracing, training, rendering and tools.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
Every successful run prints one JSON summary line on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError, NumericalError, ResourceError

log = logging.getLogger("neuralmedia")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str, n: tuple) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None
    if len(vals) not in n:
        raise UsageError(f"expected {' or '.join(map(str, n))} numbers, got {text!r}")
    return vals


def _light(text: str):
    from .lights import LightCondition

    v = _floats(text, (4, 5))
    return LightCondition(v[:3], v[3], bool(v[4]) if len(v) == 5 else False)


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (u64)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads; outputs do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nmedia", description="Neural participating media toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a dataset with the path tracer")
    p.add_argument("--preset", help="named scene/protocol preset")
    p.add_argument("--scene", help="scene JSON (instead of a preset scene)")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--spp", type=int, help="path-tracer samples per pixel")
    p.add_argument("--mode", choices=("point", "env+point"), help="lighting protocol")
    p.add_argument("--counts", help="train,val,test image counts")
    _common(p)

    p = sub.add_parser("trace", help="path-trace one view of a scene")
    p.add_argument("--scene", required=True, help="scene JSON with a camera")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spp", type=int, default=256, help="samples per pixel")
    p.add_argument("--light", help="point light x,y,z,intensity[,env]")
    p.add_argument("--decompose", action="store_true", help="also write _direct/_indirect layers")
    _common(p)

    p = sub.add_parser("train", help="fit a network set to a dataset")
    p.add_argument("--data", help="dataset directory (generated from the preset when absent)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--preset", default="sphere-desk", help="configuration preset")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--lmax", type=int, help="SH band limit 0..9, or -1 to disable SH")
    p.add_argument("--visibility", choices=("learned", "oracle"), help="shadow visibility source")
    _common(p)

    p = sub.add_parser("render", help="render views with a trained network set")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", help="dataset whose views to render")
    p.add_argument("--scene", help="scene JSON (camera, lights, sky); used without --data")
    p.add_argument("--split", default="test", help="dataset split to render")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", help="configuration preset for the marcher")
    p.add_argument("--light", help="point light x,y,z,intensity[,env] for --scene renders")
    p.add_argument("--decompose", action="store_true", help="also write _direct/_indirect layers")
    p.add_argument("--visibility", choices=("learned", "oracle"), default="learned",
                   help="shadow visibility source")
    _common(p)

    p = sub.add_parser("eval", help="PSNR/SSIM of rendered images against a dataset split")
    p.add_argument("--pred", required=True, help="directory holding images/{split}/{index}.pfm")
    p.add_argument("--data", required=True, help="reference dataset directory")
    p.add_argument("--split", default="test", help="split to compare")
    _common(p)

    p = sub.add_parser("extract", help="sample a checkpoint's medium into a voxel grid")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--out", required=True, help="output scene JSON")
    p.add_argument("--res", type=int, default=64, help="voxels per axis")
    _common(p)

    p = sub.add_parser("edit", help="scale density or albedo of every instance")
    p.add_argument("--scene", required=True, help="input scene JSON")
    p.add_argument("--out", required=True, help="output scene JSON")
    p.add_argument("--edit", action="append", required=True,
                   help="density=K or albedo[.r|.g|.b]=K; repeatable")
    _common(p)

    p = sub.add_parser("compose", help="union of several scenes")
    p.add_argument("--scene", action="append", required=True, help="scene JSON; repeatable, first is host")
    p.add_argument("--offset", action="append", default=[], help="x,y,z translation per scene")
    p.add_argument("--out", required=True, help="output scene JSON")
    _common(p)
    return parser


# --------------------------------------------------------------------------
# subcommands

def _preset(name):
    from .presets import get_preset

    return get_preset(name) if name else None


def cmd_gen_data(a) -> dict:
    from .evalkit import generate_dataset
    from .media import load_scene
    from .presets import get_preset

    pre = get_preset(a.preset or "sphere-desk")
    scene = load_scene(a.scene) if a.scene else pre.scene()
    oracle = replace(pre.oracle, spp=a.spp) if a.spp else pre.oracle
    counts = tuple(int(v) for v in _floats(a.counts, (3,))) if a.counts else pre.counts
    man = generate_dataset(scene, a.out, a.mode or pre.mode, counts, a.seed, oracle, pre.view,
                           threads=a.threads)
    return {"images": len(man["images"]), "scene_hash": man["scene_hash"], "out": str(a.out)}


def cmd_trace(a) -> dict:
    from .hdrimage import save_image
    from .media import load_scene
    from .oracle import PathTracerConfig, render_reference

    scene = load_scene(a.scene)
    if scene.camera is None:
        raise DataError(f"{a.scene} has no camera")
    light = _light(a.light) if a.light else next(iter(scene.lights.values()), None)
    if light is None:
        raise UsageError("no light: pass --light or add one to the scene")
    img = render_reference(scene, scene.camera, light,
                           PathTracerConfig(spp=a.spp, seed=a.seed, threads=a.threads))
    written = save_image(Path(a.out) / "trace", img, png=True, decompose=a.decompose)
    return {"files": [str(p) for p in written], "mean": float(img.rgb.mean())}


def cmd_train(a) -> dict:
    from .evalkit import generate_dataset, load_dataset
    from .presets import get_preset
    from .trainer import RayTable, config_to_json, train

    pre = get_preset(a.preset)
    out = Path(a.out)
    data = Path(a.data) if a.data else out / "data"
    if not a.data and not (data / "manifest.json").exists():
        generate_dataset(pre.scene(), data, pre.mode, pre.counts, a.seed, pre.oracle, pre.view,
                         threads=a.threads)
    ds = load_dataset(data)
    net_cfg = pre.network
    if a.lmax is not None:
        if a.lmax < -1 or a.lmax > 9:
            raise UsageError("--lmax must lie in 0..9 (or -1 for no SH)")
        net_cfg = replace(net_cfg, l_max=None if a.lmax < 0 else a.lmax)
    cfg = replace(pre.train, seed=a.seed)
    if a.iters is not None:
        cfg = replace(cfg, total_iters=a.iters)
    if a.visibility:
        cfg = replace(cfg, march=replace(cfg.march, visibility_source=a.visibility))
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(
        {"preset": pre.name, "data": str(data), "train": config_to_json(cfg)}, indent=1))
    table = RayTable(ds.split("train"), ds.scene.env, ds.scene.background)
    net, rows = train(table, cfg, net_cfg, out, scene=ds.scene)
    last = rows[-1] if rows else {}
    return {"checkpoint": str(out / "model.ckpt"), "iterations": cfg.total_iters,
            "render_loss": last.get("render"), "visibility_loss": last.get("visibility")}


def cmd_render(a) -> dict:
    from .evalkit import load_dataset
    from .fields import NetworkSet
    from .hdrimage import save_image
    from .media import load_scene
    from .renderer import MarchConfig, render_image

    net, _, it = NetworkSet.load(a.ckpt)
    pre = _preset(a.preset)
    cfg = pre.render if pre else MarchConfig()
    cfg = replace(cfg, seed=a.seed, threads=max(1, a.threads), visibility_source=a.visibility)
    out = Path(a.out)
    written = []
    if a.data:
        ds = load_dataset(a.data)
        views = [(f"images/{r.split}/{r.index}", r.camera, r.light) for r in ds.split(a.split)]
        scene = ds.scene
    elif a.scene:
        scene = load_scene(a.scene)
        light = _light(a.light) if a.light else next(iter(scene.lights.values()), None)
        if scene.camera is None or light is None:
            raise DataError(f"{a.scene} needs a camera and a light (or --light)")
        views = [("render", scene.camera, light)]
    else:
        raise UsageError("render needs --data or --scene")
    for stem, cam, light in views:
        img = render_image(net, cam, light, cfg, scene=scene)
        written += save_image(out / stem, img, decompose=a.decompose)
    return {"images": len(views), "files": len(written), "checkpoint_iteration": it}


def cmd_eval(a) -> dict:
    from .evalkit import compare_sets, load_dataset
    from .hdrimage import read_pfm

    ds = load_dataset(a.data)
    recs = ds.split(a.split)
    if not recs:
        raise DataError(f"split {a.split!r} is empty")
    truth, pred = {}, {}
    for r in recs:
        key = f"{r.split}/{r.index}"
        truth[key] = r.image()
        path = Path(a.pred) / "images" / r.split / f"{r.index}.pfm"
        if not path.exists():
            raise DataError(f"missing prediction {path}")
        pred[key] = read_pfm(path)
    res = compare_sets(pred, truth)
    fmt = lambda v: "inf" if math.isinf(v) else v  # noqa: E731
    return {"split": a.split, "count": res["count"], "psnr": fmt(res["psnr"]), "ssim": res["ssim"],
            "per_image": {k: {"psnr": fmt(v["psnr"]), "ssim": v["ssim"]}
                          for k, v in res["per_image"].items()}}


def cmd_extract(a) -> dict:
    from .fields import NetworkSet
    from .media import extract_grids, save_scene, single_field_scene

    net, _, _ = NetworkSet.load(a.ckpt)
    grid = extract_grids(net, (a.res,) * 3)
    save_scene(single_field_scene(grid), a.out)
    return {"out": str(a.out), "resolution": a.res, "max_sigma": float(grid.data[..., 0].max())}


def cmd_edit(a) -> dict:
    from .media import Instance, apply_edit, load_scene, parse_edit, save_scene

    scene = load_scene(a.scene)
    edits = [parse_edit(e) for e in a.edit]
    insts = []
    for inst in scene.instances:
        fld = inst.field
        for e in edits:
            fld = apply_edit(fld, e)
        insts.append(Instance(fld, inst.transform))
    save_scene(replace(scene, instances=tuple(insts)), a.out)
    return {"out": str(a.out), "edits": a.edit}


def cmd_compose(a) -> dict:
    from .media import Transform, compose, load_scene, save_scene

    if a.offset and len(a.offset) != len(a.scene):
        raise UsageError("give one --offset per --scene or none")
    offsets = [_floats(o, (3,)) for o in a.offset] or [(0.0, 0.0, 0.0)] * len(a.scene)
    parts = [(load_scene(s), Transform(np.eye(3), np.asarray(o), 1.0)) for s, o in zip(a.scene, offsets)]
    scene = compose(parts)
    save_scene(scene, a.out)
    return {"out": str(a.out), "instances": len(scene.instances)}


COMMANDS = {"gen-data": cmd_gen_data, "trace": cmd_trace, "train": cmd_train, "render": cmd_render,
            "eval": cmd_eval, "extract": cmd_extract, "edit": cmd_edit, "compose": cmd_compose}


def main(argv=None) -> int:
    level = os.environ.get("NM_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        summary = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ResourceError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"command": args.command, "status": "ok", **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
