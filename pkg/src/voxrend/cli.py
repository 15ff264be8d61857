"""Command-line entry point.

Subcommands: synth, pretrain, render, mesh, gradcheck, eval.  Exit
codes: 0 success, 1 numeric/acceptance failure, 2 usage or format
error.  Every command is deterministic under --seed; BLAS threading is
pinned before numpy loads so runs reproduce byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys

VERSION = "0.1.0"


def _pin_threads() -> None:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxrend",
                                description="rendering-based point-cloud pre-training")
    p.add_argument("--version", action="store_true", help="print version and exit")
    sub = p.add_subparsers(dest="command")

    def add_common(sp):
        sp.add_argument("--config", default=None, help="key = value config file")
        sp.add_argument("--preset", default=None, choices=["indoor", "outdoor"])
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a single config key (wins over file/preset)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)

    sp = sub.add_parser("synth", help="render a synthetic dataset from a scene file")
    sp.add_argument("scene", help="scene JSON (or 'demo' for the built-in scene)")
    sp.add_argument("out_dir")
    sp.add_argument("--views", type=int, default=None)
    sp.add_argument("--resolution", type=int, default=None)
    add_common(sp)

    sp = sub.add_parser("pretrain", help="run the pre-training loop")
    sp.add_argument("data_dir")
    sp.add_argument("out_checkpoint")
    sp.add_argument("--iters", type=int, default=None)
    sp.add_argument("--log", default=None, help="metrics CSV path (default: <ckpt>.csv)")
    add_common(sp)

    sp = sub.add_parser("render", help="render color/depth/acc maps from a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("camera", help="camera JSON file")
    sp.add_argument("out_prefix")
    sp.add_argument("--data", default=None, help="dataset dir (default: from checkpoint)")
    sp.add_argument("--width", type=int, default=None)
    sp.add_argument("--height", type=int, default=None)
    add_common(sp)

    sp = sub.add_parser("mesh", help="extract an isosurface mesh from a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("out_obj")
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--iso", type=float, default=0.0)
    sp.add_argument("--data", default=None)
    add_common(sp)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the gradient engine")
    sp.add_argument("--corrupt-group", default=None, help=argparse.SUPPRESS)
    add_common(sp)

    sp = sub.add_parser("eval", help="held-out view metrics for a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--data", default=None)
    add_common(sp)
    return p


def _resolve_config(args) -> dict:
    from . import config as config_mod

    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise config_mod.FormatError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = raw
    cfg = config_mod.resolve(args.preset, args.config, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        cfg["threads"] = args.threads
    return cfg


def cmd_synth(args) -> int:
    import numpy as np

    from .seeding import stream
    from .synth import demo_scene, load_scene, make_dataset, save_scene

    cfg = _resolve_config(args)
    views = args.views if args.views is not None else cfg["views"]
    resolution = args.resolution if args.resolution is not None else cfg["resolution"]
    if views < 2:
        print("error: need at least 2 views", file=sys.stderr)
        return 2
    scene = demo_scene() if args.scene == "demo" else load_scene(args.scene)
    rng = stream(cfg["seed"], "dataset")
    info = make_dataset(scene, args.out_dir, views, resolution, rng,
                        fuse_views=cfg["fuse_views"], threads=cfg["threads"])
    save_scene(os.path.join(args.out_dir, "scene.json"), scene)
    print(f"dataset: {info['views']} views ({info['held_out']} held out), "
          f"{info['fused_points']} fused points")
    return 0


def cmd_pretrain(args) -> int:
    from .training import LossWeights, load_dataset, pretrain

    cfg = _resolve_config(args)
    if args.iters is not None:
        cfg["iters"] = args.iters
    cfg["data_dir"] = args.data_dir
    ds = load_dataset(args.data_dir)
    log_path = args.log or (args.out_checkpoint + ".csv")
    out = pretrain(ds, cfg, LossWeights(cfg["lambda_c"], cfg["lambda_d"],
                                        cfg["lambda_sem"]),
                   out_checkpoint=args.out_checkpoint, log_path=log_path)
    print(f"final loss={out['final_loss']!r} psnr={out['psnr_rgb']!r} "
          f"depth_mae={out['mae_depth']!r}")
    return 0


def _load_for_eval(args, need_data=True):
    from .training import load_checkpoint, load_dataset

    params, cfg, manifest = load_checkpoint(args.checkpoint)
    data_dir = args.data or cfg.get("data_dir")
    if need_data and not data_dir:
        raise SystemExit2("checkpoint has no data_dir; pass --data")
    ds = load_dataset(data_dir) if need_data else None
    return params, cfg, manifest, ds


class SystemExit2(Exception):
    pass


def cmd_render(args) -> int:
    import numpy as np

    from .geometry import load_cameras
    from .imgio import write_pfm, write_ppm
    from .renderer import render_image
    from .training import rebuild_volumes

    params, cfg, _, ds = _load_for_eval(args)
    cams = load_cameras(args.camera)
    intr, pose = cams[0]
    if (args.width is not None and args.width != intr.width) or \
       (args.height is not None and args.height != intr.height):
        print(f"error: requested {args.width}x{args.height} does not match the "
              f"camera intrinsics {intr.width}x{intr.height}", file=sys.stderr)
        return 2
    volumes, model, _ = rebuild_volumes(params, cfg, ds)
    rgb, zdepth, acc, _ = render_image(volumes, model.bundle, intr, pose,
                                       cfg["samples_per_ray"])
    write_ppm(args.out_prefix + "_rgb.ppm", rgb)
    write_pfm(args.out_prefix + "_depth.pfm", zdepth)
    write_pfm(args.out_prefix + "_acc.pfm", acc)
    print(f"rendered {intr.width}x{intr.height} "
          f"(acc mean {float(np.mean(acc)):.4f})")
    return 0


def cmd_mesh(args) -> int:
    from .meshing import extract_mesh, save_obj
    from .training import rebuild_volumes

    if args.resolution < 2:
        print("error: mesh resolution must be >= 2", file=sys.stderr)
        return 2
    params, cfg, _, ds = _load_for_eval(args)
    volumes, model, _ = rebuild_volumes(params, cfg, ds)
    mesh = extract_mesh(volumes, model.bundle, args.resolution, args.iso,
                        threads=cfg["threads"])
    save_obj(args.out_obj, mesh)
    if mesh.empty:
        print("warning: no isosurface crossing; wrote an empty mesh")
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    cfg = _resolve_config(args)
    report = gradcheck.run(cfg["seed"], corrupt_group=args.corrupt_group)
    for group in gradcheck.GROUPS:
        stats = report[group]
        flag = "ok" if stats["ok"] else "FAIL"
        print(f"{group}: worst rel err {stats['worst_rel']:.3e} "
              f"({stats['worst_param']}, {stats['count']} params) {flag}")
    return 0 if gradcheck.passed(report) else 1


def cmd_eval(args) -> int:
    from .training import eval_heldout

    params, cfg, _, ds = _load_for_eval(args)
    metrics = eval_heldout(params, cfg, ds)
    print(f"psnr={metrics['psnr_rgb']!r} depth_mae={metrics['mae_depth']!r} "
          f"coverage={metrics['weight_coverage']!r}")
    return 0


def main(argv=None) -> int:
    _pin_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        from . import config as config_mod

        print(f"voxrend {VERSION} config-schema {config_mod.schema_hash()}")
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    handlers = {
        "synth": cmd_synth, "pretrain": cmd_pretrain, "render": cmd_render,
        "mesh": cmd_mesh, "gradcheck": cmd_gradcheck, "eval": cmd_eval,
    }
    from .errors import ContractError, DomainError, FormatError

    try:
        return handlers[args.command](args)
    except (FormatError, DomainError, SystemExit2, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
