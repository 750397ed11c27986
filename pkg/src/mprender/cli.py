"""Operator surface: scene generation, training, rendering, evaluation.

Anything that affects results lives in JSON config files; flags are for
paths, --force, and verbosity.  Every output directory receives the
resolved config plus its hash.  MPRENDER_THREADS caps the BLAS worker
threads (must be set before numpy loads, hence the lazy imports here).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path


def config_hash(doc: dict) -> str:
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def _write_config(out_dir: Path, doc: dict) -> str:
    h = config_hash(doc)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    (out_dir / "config.hash").write_text(h + "\n", encoding="utf-8")
    return h


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# gen-scene


def cmd_gen_scene(args) -> int:
    import numpy as np

    from .camera import save_camera
    from .imgio import write_pfm, write_png
    from .pointcloud import save_ply
    from .scenes import NoiseSpec, raycast_render, sample_cloud, scene_from_dict, scene_to_dict

    doc = _load_json(args.spec)
    out = Path(args.out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not args.force:
        raise FileExistsError(f"{manifest_path} exists; rerun with --force to overwrite")

    spec = scene_from_dict(doc)
    sampling = doc.get("sampling", {})
    noise = NoiseSpec(depth_sigma=float(sampling.get("depth_sigma", 0.0)),
                      density_fraction=float(sampling.get("density_fraction", 1.0)))
    points_per_view = int(sampling.get("points_per_view", 4096))

    resolved = {"scene": scene_to_dict(spec),
                "sampling": {"points_per_view": points_per_view,
                             "depth_sigma": noise.depth_sigma,
                             "density_fraction": noise.density_fraction}}
    h = _write_config(out, resolved)
    (out / "cameras").mkdir(exist_ok=True)
    (out / "images").mkdir(exist_ok=True)

    views = []
    for i, cam in enumerate(spec.cameras):
        cam_path = f"cameras/cam_{i:03d}.json"
        png_path = f"images/view_{i:03d}.png"
        pfm_path = f"images/view_{i:03d}.pfm"
        image, _ = raycast_render(spec, cam)
        save_camera(cam, out / cam_path)
        write_png(image, out / png_path)
        write_pfm(image, out / pfm_path)
        views.append({"camera": cam_path, "png": png_path, "pfm": pfm_path})

    store = sample_cloud(spec, spec.cameras, points_per_view, noise, seed=spec.seed)
    save_ply(store, out / "cloud.ply")
    manifest = {"ply": "cloud.ply", "views": views, "config_hash": h,
                "n_points": len(store)}
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(store)} points and {len(views)} views to {out}")
    return 0


# ---------------------------------------------------------------------------
# voxelize


def cmd_voxelize(args) -> int:
    from .camera import load_camera
    from .pointcloud import load_ply
    from .voxelizer import AggregationParams, build_volume, save_volume_dump

    store = load_ply(args.ply)
    view = load_camera(args.camera)
    volume = build_volume(store, view, AggregationParams(a=args.a, b=args.b),
                          planes=args.planes, padding=args.padding,
                          deterministic=True)
    save_volume_dump(volume, args.out)
    c, p, h, w = volume.shape
    occupied = int((volume.weight_sum > 0).sum())
    print(f"wrote {c}x{p}x{h}x{w} volume ({occupied} occupied voxels, "
          f"{volume.n_contributing} points) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _load_scene_dir(scene_dir: Path):
    from .camera import load_camera
    from .imgio import read_pfm
    from .pointcloud import load_ply

    manifest = _load_json(scene_dir / "manifest.json")
    store = load_ply(scene_dir / manifest["ply"])
    views, targets = [], []
    for entry in manifest["views"]:
        views.append(load_camera(scene_dir / entry["camera"]))
        targets.append(read_pfm(scene_dir / entry["pfm"]))
    return store, views, targets


def _train_config_from_doc(doc: dict, views):
    from .training import TrainRunConfig

    cfg = TrainRunConfig(**doc.get("train", {}))
    heights = {v.height for v in views}
    widths = {v.width for v in views}
    if heights != {cfg.height} or widths != {cfg.width}:
        raise ValueError(
            f"camera resolution {widths}x{heights} does not match config "
            f"{cfg.width}x{cfg.height}")
    return cfg


def _run_one_training(doc: dict, out_dir: Path, resume: bool) -> dict:
    import numpy as np

    from .errors import CheckpointError
    from .network import RenderNet, RenderNetArch
    from .pointcloud import subsample
    from .training import (init_optimizer, load_checkpoint, run_training)

    scene_dir = Path(doc["scene_dir"])
    store, views, targets = _load_scene_dir(scene_dir)
    if doc.get("density_fraction", 1.0) < 1.0:
        store = subsample(store, float(doc["density_fraction"]),
                          seed=int(doc.get("seed", 0)))
    train_idx = doc.get("train_views", list(range(len(views))))
    cfg = _train_config_from_doc(doc, [views[i] for i in train_idx])
    h = _write_config(out_dir, doc)

    net = RenderNet(RenderNetArch(in_channels=cfg.in_channels))
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    latest = sorted(ckpt_dir.glob("ckpt_*.ckpt"))
    if resume and latest:
        data = load_checkpoint(latest[-1], expected_config_hash=h)
        params, opt = data.params, data.opt
        store.features = data.features.copy()
    elif resume:
        raise CheckpointError(f"--resume given but no checkpoint in {ckpt_dir}")
    else:
        params = net.init_params(cfg.seed)
        opt = init_optimizer(net.param_shapes(), len(store), 8, cfg.schedule())

    try:
        records = run_training(
            store, [views[i] for i in train_idx], [targets[i] for i in train_idx],
            net, params, opt, cfg, log_path=out_dir / "log.jsonl",
            checkpoint_dir=ckpt_dir, config_hash=h)
    except KeyboardInterrupt:
        print(f"interrupted at step {opt.step}; checkpoint flushed", file=sys.stderr)
        raise
    return {"steps": opt.step, "records": len(records),
            "final_loss": records[-1]["loss"] if records else None,
            "checkpoint": str(sorted(ckpt_dir.glob('ckpt_*.ckpt'))[-1])}


def cmd_train(args) -> int:
    doc = _load_json(args.config)
    out_dir = Path(doc["out_dir"])
    summary = _run_one_training(doc, out_dir, resume=args.resume)
    print(f"trained {summary['steps']} steps "
          f"(final loss {summary['final_loss']}); checkpoint {summary['checkpoint']}")
    return 0


# ---------------------------------------------------------------------------
# render


def _restore(ckpt_path):
    from .network import RenderNet
    from .pointcloud import PointCloudStore
    from .training import TrainRunConfig, load_checkpoint

    data = load_checkpoint(ckpt_path)
    store = PointCloudStore(positions=data.positions, rgb=data.rgb,
                            features=data.features)
    cfg = TrainRunConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                            for k, v in data.train_cfg.items()})
    net = RenderNet(data.arch)
    return store, net, data.params, cfg


def render_view(store, net, params, cfg, view):
    from .training import forward_render

    image, _ = forward_render(store, view, net, params, cfg, tape=None)
    return image.pixels.data


def cmd_render(args) -> int:
    from .camera import load_camera
    from .imgio import write_pfm, write_png

    store, net, params, cfg = _restore(args.checkpoint)
    view = load_camera(args.camera)
    pixels = render_view(store, net, params, cfg, view)
    write_png(pixels, args.out)
    if args.pfm:
        write_pfm(pixels, Path(args.out).with_suffix(".pfm"))
    print(f"rendered {view.width}x{view.height} view to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _metric_rows(store, net, params, cfg, views, targets, names):
    from .metrics import evaluate

    rows = []
    for name, view, target in zip(names, views, targets):
        pixels = render_view(store, net, params, cfg, view)
        report = evaluate(pixels, target)
        rows.append({"view": name, "psnr": report.psnr, "ssim": report.ssim})
    return rows


def _format_table(rows, columns) -> str:
    headers = list(columns)
    cells = [[str(r[c]) if not isinstance(r[c], float) else repr(r[c]) for c in columns]
             for r in rows]
    widths = [max(len(h), *(len(row[i]) for row in cells)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def _read_target(path):
    from .imgio import read_pfm, read_png

    path = str(path)
    return read_pfm(path) if path.endswith(".pfm") else read_png(path)


def cmd_eval(args) -> int:
    from .camera import load_camera

    if len(args.camera) != len(args.target):
        raise ValueError(f"{len(args.camera)} cameras but {len(args.target)} targets")
    store, net, params, cfg = _restore(args.checkpoint)
    views = [load_camera(c) for c in args.camera]
    targets = [_read_target(t) for t in args.target]
    rows = _metric_rows(store, net, params, cfg, views, targets, args.camera)
    table = _format_table(rows, ("view", "psnr", "ssim"))
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.json", "w", encoding="utf-8") as f:
            json.dump({"rows": rows}, f, indent=2, sort_keys=True)
            f.write("\n")
        (out / "eval.txt").write_text(table, encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args) -> int:
    import numpy as np

    from .metrics import psnr as psnr_fn, ssim as ssim_fn, zbuffer_render
    from .pointcloud import subsample

    doc = _load_json(args.config)
    out_dir = Path(doc["out_dir"])
    _write_config(out_dir, doc)
    scene_dir = Path(doc["scene_dir"])
    densities = doc.get("densities", [1.0, 0.5, 0.25])
    splat = int(doc.get("splat_size", 1))
    seed = int(doc.get("seed", 0))
    heldout = doc["heldout_views"]

    runs = {}
    for method, mode in (("ours", "learned"), ("direct-render", "rgb")):
        sub = dict(doc)
        sub.pop("densities", None)
        sub.pop("splat_size", None)
        sub["train"] = dict(doc.get("train", {}), feature_mode=mode)
        sub["out_dir"] = str(out_dir / method.replace("-", "_"))
        _run_one_training(sub, Path(sub["out_dir"]), resume=False)
        ckpts = sorted((Path(sub["out_dir"]) / "checkpoints").glob("ckpt_*.ckpt"))
        runs[method] = _restore(ckpts[-1])

    _, views, targets = _load_scene_dir(scene_dir)
    grid = []
    for method in ("ours", "direct-render", "z-buffer"):
        for density in densities:
            psnrs, ssims = [], []
            if method == "z-buffer":
                base_store, _, _, _ = runs["ours"]
                eval_store = (subsample(base_store, density, seed)
                              if density < 1.0 else base_store)
                for i in heldout:
                    zb = zbuffer_render(eval_store, views[i], splat_size=splat)
                    psnrs.append(psnr_fn(zb.color, targets[i]))
                    ssims.append(ssim_fn(zb.color, targets[i]))
            else:
                store, net, params, cfg = runs[method]
                eval_store = subsample(store, density, seed) if density < 1.0 else store
                for i in heldout:
                    pixels = render_view(eval_store, net, params, cfg, views[i])
                    psnrs.append(psnr_fn(pixels, targets[i]))
                    ssims.append(ssim_fn(pixels, targets[i]))
            grid.append({"method": method, "density": density,
                         "psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))})

    table = _format_table(grid, ("method", "density", "psnr", "ssim"))
    print(table, end="")
    with open(out_dir / "compare.json", "w", encoding="utf-8") as f:
        json.dump({"grid": grid}, f, indent=2, sort_keys=True)
        f.write("\n")
    (out_dir / "compare.txt").write_text(table, encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mprender",
        description="Point-cloud rendering through layered frustum volumes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene directory")
    p.add_argument("spec", help="scene spec JSON (or {'preset': 'box-plane'})")
    p.add_argument("out_dir")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("voxelize", help="dump an aggregated feature volume")
    p.add_argument("--ply", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--planes", type=int, default=8)
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--padding", type=float, default=1e-3)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("train", help="train network parameters and point features")
    p.add_argument("config", help="run config JSON")
    p.add_argument("--resume", action="store_true",
                   help="continue from the latest checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint from a camera")
    p.add_argument("checkpoint")
    p.add_argument("camera")
    p.add_argument("out", help="output PNG path")
    p.add_argument("--pfm", action="store_true", help="also write a PFM next to the PNG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="metric table for rendered views vs targets")
    p.add_argument("checkpoint")
    p.add_argument("--camera", action="append", required=True)
    p.add_argument("--target", action="append", required=True)
    p.add_argument("--out", help="directory for eval.json / eval.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare",
                       help="metrics for ours / direct-render / z-buffer over a density sweep")
    p.add_argument("config")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("MPRENDER_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # one-line machine-parsable failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
