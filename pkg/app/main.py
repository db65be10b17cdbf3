"""
Command-line entry point: one subcommand per pipeline stage.

    gen-synthetic  analytic scene -> dataset directory + ground-truth mesh
    build-occ      dataset -> visibility-classified occupancy grid
    train          dataset + grid -> checkpoint + CSV log
    render         checkpoint + grid + dataset cameras -> images
    mesh           checkpoint + grid -> OBJ/PLY
    eval           meshes and image directories -> MetricReport JSON

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from app.config import ConfigError, PipelineConfig, configure_logging, get_runtime_config, load_config
from app.dataset_io import IMAGE_SUFFIXES, atomic_write, load_dataset, read_image, save_dataset
from app.encoding import DegreeWindow
from app.field import load_checkpoint, save_checkpoint
from app.mesh import MESH_SUFFIXES, analytic_mesh, marching_cubes, mesh_points, save_mesh
from app.metrics import evaluate
from app.occupancy import build_grid, classify_visible, export_state_clouds, load_grid, save_grid
from app.optimizer import AdamState
from app.renderer import RENDER_MODES, Renderer, save_render
from app.scene import CameraIntrinsics, Dataset, desk_scene, orbit_trajectory
from app.synthetic import downsample_scans, generate_synthetic, inject_dynamic_points
from app.trainer import train


class UsageError(Exception):
    """Arguments parsed but describe an impossible request."""


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline TOML file (defaults: desk scale)")
    common.add_argument("--seed", type=int, help="overrides [train] seed; fixes all randomness")
    common.add_argument("--workers", type=int, help="parallel width of batch operations (env M2MAP_WORKERS)")
    common.add_argument("--full-scale", action="store_true", help="full-size hash tables and point budget")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="m2map", description="Neural SDF and radiance field mapping from images and LiDAR.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="render a synthetic desk scene")
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.add_argument("--noise", type=float, help="LiDAR range noise sigma in meters")
    p.add_argument("--dynamic-fraction", type=float, default=0.0, help="floating points injected per scan")
    p.add_argument("--downsample", type=int, default=1, help="keep every n-th scan point")

    p = sub.add_parser("build-occ", parents=[common], help="build the visible-aware occupancy grid")
    p.add_argument("--dataset", type=Path, required=True, help="manifest.json or its directory")
    p.add_argument("--out", type=Path, required=True, help="grid file")
    p.add_argument("--voxel", type=float, help="voxel size in meters")
    p.add_argument("--export-states", type=Path, help="directory for per-state PLY clouds")

    p = sub.add_parser("train", parents=[common], help="fit the field")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint file")
    p.add_argument("--log", type=Path, help="CSV training log")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("render", parents=[common], help="render views of a trained field")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True, help="dataset whose cameras are rendered")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--mode", choices=RENDER_MODES, default="color")
    p.add_argument("--views", type=int, nargs="*", help="frame indices (default: all)")
    p.add_argument("--strategy", choices=("structure_aware", "uniform"), default="structure_aware")

    p = sub.add_parser("mesh", parents=[common], help="extract the zero level set")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--res", type=int, default=128, help="lattice cells per axis")
    p.add_argument("--out", type=Path, required=True, help=f"mesh file {MESH_SUFFIXES}")

    p = sub.add_parser("eval", parents=[common], help="geometry and image metrics")
    p.add_argument("--pred", type=Path, help="reconstructed mesh")
    p.add_argument("--gt", type=Path, help="reference mesh")
    p.add_argument("--images-pred", type=Path, help="directory of rendered images")
    p.add_argument("--images-gt", type=Path, help="directory of reference images")
    p.add_argument("--points", type=int, default=100_000, help="surface samples per mesh")
    p.add_argument("--threshold", type=float, default=0.02, help="F-score distance in meters")
    p.add_argument("--out", type=Path, help="JSON report file (printed when omitted)")
    return parser


def _manifest(path: Path) -> Path:
    return path / "manifest.json" if path.is_dir() else path


def _validate_paths(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    """Fail with usage (exit 2) before any work when an input is missing."""
    inputs = {
        "build-occ": ("dataset",),
        "train": ("dataset", "grid", "resume"),
        "render": ("checkpoint", "grid", "dataset"),
        "mesh": ("checkpoint", "grid"),
        "eval": ("pred", "gt", "images_pred", "images_gt"),
    }.get(args.command, ()) + ("config",)
    for name in dict.fromkeys(inputs):
        value = getattr(args, name, None)
        if value is None:
            continue
        target = _manifest(value) if name == "dataset" else value
        if name.startswith("images"):
            if not value.is_dir():
                parser.error(f"--{name.replace('_', '-')} {value}: no such directory")
        elif not target.exists():
            parser.error(f"--{name.replace('_', '-')} {value}: no such file")
    if args.workers is not None and args.workers < 1:
        parser.error("--workers must be >= 1")
    if args.command == "mesh" and (args.res < 2 or args.out.suffix.lower() not in MESH_SUFFIXES):
        parser.error(f"mesh needs --res >= 2 and an output ending in {MESH_SUFFIXES}")
    if args.command == "eval":
        if (args.pred is None) != (args.gt is None):
            parser.error("eval needs both --pred and --gt")
        if (args.images_pred is None) != (args.images_gt is None):
            parser.error("eval needs both --images-pred and --images-gt")
        if args.pred is None and args.images_pred is None:
            parser.error("eval needs meshes, image directories, or both")


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config).with_seed(args.seed)
    return config.full_scale() if args.full_scale else config


def _write_json(path: Path, payload: str) -> None:
    with atomic_write(path, "w") as handle:
        handle.write(payload + "\n")


# ---- subcommands ----

def cmd_gen_synthetic(args: argparse.Namespace, config: PipelineConfig, workers: int) -> None:
    syn = config.synthetic
    noise = syn.noise_sigma if args.noise is None else args.noise
    seed = config.train.seed
    spec, bounds = desk_scene()
    camera = CameraIntrinsics(
        fx=syn.focal, fy=syn.focal, cx=syn.width / 2.0, cy=syn.height / 2.0, width=syn.width, height=syn.height
    )
    target = (0.0, 0.0, 0.4)
    trajectory = orbit_trajectory(target, syn.orbit_radius, syn.orbit_height, syn.views)
    dataset = generate_synthetic(spec, trajectory, camera, syn.lidar_rays_per_scan, noise, seed, bounds)
    if args.dynamic_fraction > 0:
        dataset, injected = inject_dynamic_points(dataset, args.dynamic_fraction, seed, 4 * config.occupancy.voxel_size, spec)
        logging.info("Injected %d dynamic points", sum(len(p) for p in injected))
    if args.downsample > 1:
        dataset = downsample_scans(dataset, args.downsample)
    save_dataset(dataset, args.out)
    save_mesh(analytic_mesh(spec, bounds, syn.gt_resolution), args.out / "gt.obj")

    if syn.held_out_views:
        # Offset by half a step so held-out cameras sit between training cameras.
        phase = np.pi / syn.held_out_views
        held = orbit_trajectory(target, syn.orbit_radius, syn.orbit_height, syn.held_out_views, phase=phase)
        views = generate_synthetic(spec, held, camera, 0, 0.0, seed + 1, bounds)
        save_dataset(Dataset(images=views.images, scans=(), bounds=bounds), args.out / "held_out")


def cmd_build_occ(args: argparse.Namespace, config: PipelineConfig, workers: int) -> None:
    dataset = load_dataset(_manifest(args.dataset))
    voxel = config.occupancy.voxel_size if args.voxel is None else args.voxel
    grid = build_grid(dataset.scans, dataset.bounds, voxel, workers=workers)
    grid = classify_visible(grid, dataset.images, config.occupancy.ray_stride, workers=workers)
    save_grid(grid, args.out)
    if args.export_states is not None:
        export_state_clouds(grid, args.export_states)


def cmd_train(args: argparse.Namespace, config: PipelineConfig, workers: int) -> None:
    dataset = load_dataset(_manifest(args.dataset))
    grid = load_grid(args.grid)
    train_config = config.train if args.iterations is None else replace(config.train, iterations=args.iterations)
    field_config = config.field_config()
    if train_config.fixed_beta is not None:
        field_config = replace(field_config, fixed_beta=train_config.fixed_beta)
    resume = None
    if args.resume is not None:
        params, state = load_checkpoint(args.resume, expected=field_config)
        resume = (params, state if state is not None else AdamState())
    params, log = train(
        dataset, grid, train_config, field_config, config.sampler, config.render, workers=workers, resume=resume
    )
    save_checkpoint(args.out, params, log.optimizer_state)
    if args.log is not None:
        log.to_csv(args.log)


def cmd_render(args: argparse.Namespace, config: PipelineConfig, workers: int) -> None:
    params, _ = load_checkpoint(args.checkpoint)
    grid = load_grid(args.grid)
    dataset = load_dataset(_manifest(args.dataset))
    views = range(len(dataset.images)) if not args.views else args.views
    for i in views:
        if not 0 <= i < len(dataset.images):
            raise UsageError(f"view {i} out of range (dataset has {len(dataset.images)} images)")
    renderer = Renderer(params, grid, config.sampler, config.render, strategy=args.strategy, workers=workers)
    logging.info("Sampling: %s", "; ".join(renderer.get_strategy_info()["reasons"]))
    args.out.mkdir(parents=True, exist_ok=True)
    for i in views:
        image = dataset.images[i]
        frame = renderer.render_image(image.intrinsics, image.pose, DegreeWindow(), args.mode)
        save_render(args.out / f"{i:04d}.png", frame, args.mode, config.render)


def cmd_mesh(args: argparse.Namespace, config: PipelineConfig, workers: int) -> None:
    params, _ = load_checkpoint(args.checkpoint)
    grid = load_grid(args.grid)
    save_mesh(marching_cubes(params, grid, args.res), args.out)


def _image_pairs(pred_dir: Path, gt_dir: Path):
    """Images present in both directories, matched by file name."""
    names = sorted(p.name for p in gt_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    matched = [n for n in names if (pred_dir / n).is_file()]
    if not matched:
        raise UsageError(f"No image file names shared by {pred_dir} and {gt_dir}")
    if len(matched) < len(names):
        logging.warning("%d reference images have no rendered counterpart", len(names) - len(matched))
    return [read_image(pred_dir / n) for n in matched], [read_image(gt_dir / n) for n in matched]


def cmd_eval(args: argparse.Namespace, config: PipelineConfig, workers: int) -> None:
    seed = config.train.seed
    pred_points = gt_points = None
    if args.pred is not None:
        pred_points = mesh_points(args.pred, args.points, seed)
        gt_points = mesh_points(args.gt, args.points, seed)
    pred_images, gt_images = ([], [])
    if args.images_pred is not None:
        pred_images, gt_images = _image_pairs(args.images_pred, args.images_gt)
    report = evaluate(pred_points, gt_points, pred_images, gt_images, args.threshold)
    logging.info("Metrics:\n%s", report.to_table())
    if args.out is not None:
        _write_json(args.out, report.to_json())
    else:
        print(report.to_json())


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "build-occ": cmd_build_occ,
    "train": cmd_train,
    "render": cmd_render,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate_paths(parser, args)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        runtime = get_runtime_config()
        configure_logging(runtime.log_level)
        config = _pipeline_config(args)
        workers = runtime.workers if args.workers is None else args.workers
        COMMANDS[args.command](args, config, workers)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        logging.error("Configuration error: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logging.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
