"""Command-line entry point: ``geosplat <command> [options]``.

Every command accepts ``--config FILE`` (INI, see README) plus
``--set section.key=value`` overrides. Errors exit with status 1 and a
single ``error:`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .formats import FormatError

IMAGE_SUFFIXES = (".png", ".ppm")


def _cfg(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise FormatError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    for attr in ("points", "cameras", "images", "mesh"):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[f"paths.{attr}"] = value
    if getattr(args, "out", None) is not None:
        overrides["paths.output"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    cfg = formats.load_config(args.config, overrides)
    cfg.check_paths()
    return cfg


def _require(cfg, key: str) -> str:
    value = getattr(cfg, key)
    if value is None:
        raise FormatError(f"missing required path '{key}' (flag --{key} or [paths] {key})")
    return value


def image_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_views(cameras_path, images_dir) -> list:
    cams = formats.load_cameras(cameras_path)
    files = image_files(images_dir)
    if len(files) != len(cams):
        raise FormatError(f"{images_dir}: {len(files)} images for {len(cams)} cameras in {cameras_path}")
    views = []
    for cam, f in zip(cams, files):
        img = formats.load_image(f)
        if img.shape[:2] != (cam.height, cam.width):
            raise FormatError(f"{f}: image is {img.shape[1]}x{img.shape[0]}, camera expects {cam.width}x{cam.height}")
        views.append((cam, img))
    return views


def _write_images(directory, images, ext: str) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        formats.save_image(d / f"{i:03d}.{ext}", img)


def cmd_synth(args) -> int:
    from .synth import synth_scene

    cfg = _cfg(args)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    s = synth_scene(args.kind, args.n, args.views, seed=cfg.seed, n_test_views=args.test_views,
                    image_size=args.size, cloud_noise=args.noise)
    formats.save_points(out / "points.ply", s.cloud)
    formats.save_mesh(out / "mesh.ply", s.mesh)
    formats.save_gaussians(out / "gt.ply", s.gt)
    formats.save_cameras(out / "cameras.json", s.cameras)
    _write_images(out / "images", s.images, args.ext)
    if args.test_views:
        formats.save_cameras(out / "test_cameras.json", s.test_cameras)
        _write_images(out / "test_images", s.test_images, args.ext)
    project = formats.ProjectConfig(points="points.ply", cameras="cameras.json", images="images", mesh="mesh.ply",
                                    output=".", seed=cfg.seed, sections=cfg.sections)
    formats.write_config(out / "project.ini", project)
    print(f"wrote {args.kind} scene with {args.n} Gaussians and {args.views} views to {out}")
    return 0


def cmd_init_train(args) -> int:
    from .geoinit import denoising_dataset, sample_surface, save_model, seed_scene, train_init

    cfg = _cfg(args)
    cloud = formats.load_points(_require(cfg, "points"))
    init_cfg = cfg.module_config("init")
    if cfg.mesh is not None:
        clean = sample_surface(formats.load_mesh(cfg.mesh), args.samples, cfg.seed)
        dataset = denoising_dataset(clean, args.noise, cfg.seed + 1)
    else:
        formats.warn("no mesh given; training the init network on the cloud itself")
        dataset = denoising_dataset(cloud.points, args.noise, cfg.seed + 1)
    model, report = train_init(dataset, init_cfg)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "init_model.txt", model)
    formats.save_gaussians(out / "init.ply", seed_scene(cloud, model))
    print(f"held-out init loss {report.best_holdout_loss:.4e} (epoch {report.best_epoch}); "
          f"wrote {out / 'init_model.txt'} and {out / 'init.ply'}")
    return 0


def _initial_scene(args, cfg):
    from .geoinit import seed_scene
    from .synth import random_init_scene

    if args.init not in ("random", "cloud"):
        return formats.load_gaussians(args.init)
    cloud = formats.load_points(_require(cfg, "points"))
    if args.init == "random":
        return random_init_scene(cloud, args.n if args.n else len(cloud), seed=cfg.seed + 1)
    return seed_scene(cloud)


def cmd_fit(args) -> int:
    from .train import TrainSchedule, evaluate, fit

    cfg = _cfg(args)
    views = load_views(_require(cfg, "cameras"), _require(cfg, "images"))
    scene0 = _initial_scene(args, cfg)
    mesh = formats.load_mesh(cfg.mesh) if cfg.mesh is not None else None
    sched_kw = dict(cfg.sections.get("schedule", {}))
    sched_kw.setdefault("seed", cfg.seed)
    if args.iters is not None:
        sched_kw["total_iters"] = args.iters
    schedule = TrainSchedule(**sched_kw)
    adc = None if args.no_adc else cfg.module_config("adc")
    surf = cfg.module_config("surface")
    scene, tlog = fit(scene0, views, mesh, schedule, adc, surf)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    formats.save_gaussians(out / "scene.ply", scene)
    tlog.write(out / "train_log.jsonl")
    if tlog.message:
        formats.warn(tlog.message)
    rows = evaluate(scene, views)
    print(f"fitted {len(scene)} Gaussians; train PSNR {np.mean([r['psnr'] for r in rows]):.2f} dB; "
          f"wrote {out / 'scene.ply'}")
    return 0


def cmd_render(args) -> int:
    from .raster import render

    cams = formats.load_cameras(args.cameras)
    scene = formats.load_gaussians(args.scene)
    images = [render(scene, c, threads=args.threads).image for c in cams]
    _write_images(args.out, images, args.ext)
    print(f"rendered {len(images)} views to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import psnr, ssim

    targets = [formats.load_image(f) for f in image_files(args.images)]
    if args.pred is not None:
        preds = [formats.load_image(f) for f in image_files(args.pred)]
    else:
        if args.scene is None or args.cameras is None:
            raise FormatError("eval needs --pred DIR, or --scene and --cameras")
        from .raster import render

        scene = formats.load_gaussians(args.scene)
        preds = [render(scene, c).image for c in formats.load_cameras(args.cameras)]
    if len(preds) != len(targets):
        raise FormatError(f"{len(preds)} predictions for {len(targets)} targets in {args.images}")
    rows = [(psnr(p, t), ssim(p, t)) for p, t in zip(preds, targets)]
    print(f"{'view':>5} {'psnr':>8} {'ssim':>7}")
    for i, (p, s) in enumerate(rows):
        print(f"{i:5d} {p:8.2f} {s:7.4f}")
    print(f"{'mean':>5} {np.mean([r[0] for r in rows]):8.2f} {np.mean([r[1] for r in rows]):7.4f}")
    return 0


def cmd_adc_report(args) -> int:
    from .density import run_adc_step
    from .metrics import photometric_loss_and_grad
    from .raster import render, render_backward

    cfg = _cfg(args)
    views = load_views(_require(cfg, "cameras"), _require(cfg, "images"))
    scene = formats.load_gaussians(args.scene)
    adc_cfg = cfg.module_config("adc")
    # one pass over the views fills the gradient accumulators the clone rule reads
    for cam, target in views:
        out = render(scene, cam)
        _, dimg = photometric_loss_and_grad(out.image, target)
        render_backward(scene, cam, dimg, out)
    new_scene, _, report = run_adc_step(scene, None, [c for c, _ in views], adc_cfg, cfg.seed)
    print(json.dumps(report.as_dict(), sort_keys=True))
    if args.write:
        formats.save_gaussians(args.write, new_scene)
    return 0


def cmd_colmap_convert(args) -> int:
    src = Path(args.colmap)
    for name in ("cameras.txt", "images.txt"):
        if not (src / name).exists():
            raise FileNotFoundError(f"COLMAP file not found: {src / name}")
    pairs = formats.colmap_to_cameras(src / "cameras.txt", src / "images.txt")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.save_cameras(out / "cameras.json", [c for _, c in pairs])
    (out / "image_names.txt").write_text("".join(n + "\n" for n, _ in pairs))
    if (src / "points3D.txt").exists():
        formats.save_points(out / "points.ply", formats.colmap_points(src / "points3D.txt"))
    print(f"converted {len(pairs)} cameras to {out / 'cameras.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geosplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, paths=("points", "cameras", "images", "mesh")):
        sp.add_argument("--config", help="INI project config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        for name in paths:
            sp.add_argument(f"--{name}")

    sp = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    sp.add_argument("kind", choices=["sphere", "cube", "two-planes"])
    sp.add_argument("--n", type=int, default=50, help="number of ground-truth Gaussians")
    sp.add_argument("--views", type=int, default=8)
    sp.add_argument("--test-views", type=int, default=0)
    sp.add_argument("--size", type=int, default=64, help="image side in pixels")
    sp.add_argument("--noise", type=float, default=0.01, help="cloud noise sigma")
    sp.add_argument("--ext", choices=["png", "ppm"], default="png")
    common(sp, paths=())
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("init-train", help="train the point-refinement network and seed a scene")
    sp.add_argument("--samples", type=int, default=3000, help="clean surface samples drawn from the mesh")
    sp.add_argument("--noise", type=float, default=0.01, help="noise sigma of the training inputs")
    common(sp)
    sp.set_defaults(func=cmd_init_train)

    sp = sub.add_parser("fit", help="optimize a Gaussian scene against posed images")
    sp.add_argument("--init", default="random", help="'random', 'cloud' or a Gaussian PLY path")
    sp.add_argument("--n", type=int, default=0, help="Gaussians for random init (default: cloud size)")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--no-adc", action="store_true", help="disable density control")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("render", help="render a scene from cameras to image files")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ext", choices=["png", "ppm"], default="png")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="PSNR/SSIM table against target images")
    sp.add_argument("--images", required=True, help="directory of target images")
    sp.add_argument("--pred", help="directory of predicted images")
    sp.add_argument("--scene")
    sp.add_argument("--cameras")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("adc-report", help="run one density-control step and report it")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--write", help="save the post-step scene here")
    common(sp, paths=("cameras", "images"))
    sp.set_defaults(func=cmd_adc_report)

    sp = sub.add_parser("colmap-convert", help="convert COLMAP text output to camera JSON")
    sp.add_argument("colmap", help="directory with cameras.txt, images.txt [, points3D.txt]")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_colmap_convert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, OSError) and exc.filename and str(exc.filename) not in msg:
            msg = f"{msg}: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
