"""
Dataset persistence: JSON manifest, PNG/PPM images and PLY scans.

Manifest layout::

    {
      "camera": {"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..},
      "frames": [{"pose": [16 numbers, row-major world-from-camera], "image": "images/000.png"}],
      "scans":  [{"origin": [x, y, z], "file": "scans/000.ply"}],
      "bounds": {"min": [x, y, z], "max": [x, y, z]}
    }

Paths inside the manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import contextlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Iterator, Union

import imageio.v2 as imageio
import numpy as np
import trimesh

from app.scene import Bounds, CameraIntrinsics, Dataset, PointScan, Pose, PosedImage


PathLike = Union[str, Path]
IMAGE_SUFFIXES = (".png", ".ppm")


class DatasetError(ValueError):
    """Raised when a dataset on disk is missing, malformed or inconsistent."""


@contextlib.contextmanager
def atomic_write(path: PathLike, mode: str = "wb") -> Iterator:
    """Write to a temporary sibling file and rename it over `path` on success."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as handle:
            yield handle
        os.replace(tmp_name, target)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp_name)
        raise


@contextlib.contextmanager
def atomic_path(path: PathLike) -> Iterator[Path]:
    """Like atomic_write, for writers that need a filename (imageio, trimesh)."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.stem}.", suffix=target.suffix)
    os.close(fd)
    try:
        yield Path(tmp_name)
        os.replace(tmp_name, target)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp_name)
        raise


# ---- images ----

def write_image(path: PathLike, pixels: np.ndarray) -> None:
    """Write an [H, W, 3] float image in [0, 1] as 8-bit PNG (or PPM by suffix)."""
    data = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    with atomic_path(path) as tmp:
        imageio.imwrite(tmp, data)


def read_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"Image file not found: {path}")
    try:
        data = imageio.imread(path)
    except Exception as e:
        raise DatasetError(f"Could not decode image {path}: {e}") from e
    data = np.asarray(data)
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=-1)
    data = data[..., :3]
    scale = 65535.0 if data.dtype == np.uint16 else 255.0
    return data.astype(np.float64) / scale


# ---- point clouds ----

def write_ply_points(path: PathLike, points: np.ndarray) -> None:
    """ASCII PLY of x, y, z vertices."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with atomic_path(path) as tmp:
        trimesh.PointCloud(points).export(str(tmp), file_type="ply", encoding="ascii")


def read_ply_points(path: PathLike) -> np.ndarray:
    """Vertex positions of an ASCII or binary PLY; faces, if any, are ignored."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"Scan file not found: {path}")
    try:
        loaded = trimesh.load(str(path), file_type="ply", process=False)
    except Exception as e:
        raise DatasetError(f"{path} is not a readable PLY point cloud: {e}") from e
    if isinstance(loaded, trimesh.Scene):
        if not loaded.geometry:
            return np.zeros((0, 3))
        return np.concatenate([np.asarray(g.vertices, dtype=np.float64) for g in loaded.geometry.values()])
    vertices = getattr(loaded, "vertices", None)
    if vertices is None:
        raise DatasetError(f"{path}: no vertex element")
    return np.asarray(vertices, dtype=np.float64).reshape(-1, 3)


# ---- manifest ----

def save_dataset(dataset: Dataset, directory: PathLike) -> Path:
    """Write images, scans and `manifest.json` under `directory`.

    Returns:
        Path of the written manifest.
    """
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "scans").mkdir(parents=True, exist_ok=True)

    frames = []
    for i, image in enumerate(dataset.images):
        rel = f"images/{i:04d}.png"
        write_image(root / rel, image.pixels)
        frames.append({"pose": image.pose.matrix().ravel().tolist(), "image": rel})

    scans = []
    for i, scan in enumerate(dataset.scans):
        rel = f"scans/{i:04d}.ply"
        write_ply_points(root / rel, scan.points)
        scans.append({"origin": scan.origin.tolist(), "file": rel})

    manifest = {
        "frames": frames,
        "scans": scans,
        "bounds": {"min": dataset.bounds.minimum.tolist(), "max": dataset.bounds.maximum.tolist()},
    }
    if dataset.images:
        cam = dataset.camera
        manifest["camera"] = {
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
        }

    manifest_path = root / "manifest.json"
    with atomic_write(manifest_path, "w") as handle:
        json.dump(manifest, handle, indent=2)
    logging.info("Saved dataset with %d frames and %d scans to %s", len(frames), len(scans), root)
    return manifest_path


def load_dataset(manifest_path: PathLike) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"Manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"Malformed manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, dict):
        raise DatasetError(f"Manifest {manifest_path} must be a JSON object")
    root = manifest_path.parent

    frames = manifest.get("frames", [])
    scan_entries = manifest.get("scans", [])
    for key, value in (("frames", frames), ("scans", scan_entries)):
        if not isinstance(value, list):
            raise DatasetError(f"Manifest {manifest_path}: '{key}' must be a list, got {type(value).__name__}")

    try:
        bounds = Bounds(np.asarray(manifest["bounds"]["min"]), np.asarray(manifest["bounds"]["max"]))
        camera = None
        if frames:
            camera = CameraIntrinsics(**{k: manifest["camera"][k] for k in ("fx", "fy", "cx", "cy")},
                                      width=int(manifest["camera"]["width"]),
                                      height=int(manifest["camera"]["height"]))
    except (KeyError, TypeError) as e:
        raise DatasetError(f"Manifest {manifest_path} is missing field {e}") from e
    except ValueError as e:
        raise DatasetError(f"Manifest {manifest_path}: {e}") from e

    images = []
    for i, frame in enumerate(frames):
        if not isinstance(frame, dict):
            raise DatasetError(f"Frame {i} must be an object, got {type(frame).__name__}")
        try:
            pose = Pose.from_matrix(frame["pose"])
            image_path = root / frame["image"]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"Frame {i} is invalid: {e}") from e
        pixels = read_image(image_path)
        try:
            images.append(PosedImage(intrinsics=camera, pose=pose, pixels=pixels))
        except ValueError as e:
            raise DatasetError(f"Frame {i} ({frame['image']}): {e}") from e

    scans = []
    for i, entry in enumerate(scan_entries):
        if not isinstance(entry, dict):
            raise DatasetError(f"Scan {i} must be an object, got {type(entry).__name__}")
        try:
            origin = np.asarray(entry["origin"], dtype=np.float64)
            scan_path = root / entry["file"]
        except (KeyError, TypeError) as e:
            raise DatasetError(f"Scan {i} is invalid: {e}") from e
        try:
            scans.append(PointScan(origin=origin, points=read_ply_points(scan_path)))
        except ValueError as e:
            raise DatasetError(f"Scan {i} ({entry['file']}): {e}") from e

    try:
        return Dataset(images=tuple(images), scans=tuple(scans), bounds=bounds)
    except ValueError as e:
        raise DatasetError(f"Dataset {manifest_path} failed validation: {e}") from e
