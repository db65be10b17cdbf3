from __future__ import annotations

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.scene import (
    AMBIENT_TERM,
    BACKGROUND_COLOR,
    Bounds,
    CameraIntrinsics,
    Dataset,
    PointScan,
    Pose,
    PosedImage,
    SceneSpec,
    analytic_normal,
    analytic_sdf,
    nearest_primitive,
    pixel_rays,
)


_HIT_EPS = 1e-7
_MAX_TRACE_STEPS = 512


def sphere_trace(
    spec: SceneSpec,
    origins: np.ndarray,
    directions: np.ndarray,
    t_far: float,
    max_steps: int = _MAX_TRACE_STEPS,
) -> Tuple[np.ndarray, np.ndarray]:
    """March all rays against the analytic SDF until they hit or leave `t_far`.

    Returns:
        (t [N], hit [N] bool). `t` is meaningless where `hit` is False.
    """
    count = len(origins)
    t = np.zeros(count)
    hit = np.zeros(count, dtype=bool)
    active = np.ones(count, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        distance = analytic_sdf(spec, origins[idx] + t[idx, None] * directions[idx])
        converged = np.abs(distance) < _HIT_EPS
        hit[idx[converged]] = True
        active[idx[converged]] = False
        moving = idx[~converged]
        t[moving] += np.abs(distance[~converged])
        escaped = moving[t[moving] > t_far]
        active[escaped] = False
    return t, hit


def shade(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Lambertian shading with a constant ambient term."""
    normals = analytic_normal(spec, points)
    light = np.asarray(spec.light_direction)
    lambert = np.maximum(0.0, normals @ light)
    albedo = np.asarray([spec.primitives[i].albedo for i in nearest_primitive(spec, points)], dtype=np.float64)
    return np.clip(albedo * (lambert + AMBIENT_TERM)[:, None], 0.0, 1.0)


def render_reference(spec: SceneSpec, camera: CameraIntrinsics, pose: Pose, t_far: float) -> np.ndarray:
    """Ray-traced reference image ([H, W, 3] in [0, 1])."""
    vs, us = np.mgrid[0:camera.height, 0:camera.width]
    origins, directions = pixel_rays(camera, pose, us.ravel(), vs.ravel())
    t, hit = sphere_trace(spec, origins, directions, t_far)
    colors = np.tile(np.asarray(BACKGROUND_COLOR, dtype=np.float64), (len(t), 1))
    if hit.any():
        colors[hit] = shade(spec, origins[hit] + t[hit, None] * directions[hit])
    return colors.reshape(camera.height, camera.width, 3)


def lidar_directions(rng: np.random.Generator, count: int, vertical_fov_deg: float = 45.0) -> np.ndarray:
    """Uniform directions on the sphere band |elevation| <= vertical_fov_deg (world z up)."""
    limit = np.sin(np.radians(vertical_fov_deg))
    z = rng.uniform(-limit, limit, size=count)
    azimuth = rng.uniform(0.0, 2.0 * np.pi, size=count)
    radial = np.sqrt(1.0 - z * z)
    return np.stack([radial * np.cos(azimuth), radial * np.sin(azimuth), z], axis=-1)


def simulate_scan(
    spec: SceneSpec,
    origin: np.ndarray,
    bounds: Bounds,
    rays: int,
    noise_sigma: float,
    rng: np.random.Generator,
    vertical_fov_deg: float = 45.0,
) -> PointScan:
    directions = lidar_directions(rng, rays, vertical_fov_deg)
    origins = np.broadcast_to(origin, directions.shape)
    t_far = float(np.linalg.norm(bounds.extent)) * 2.0
    t, hit = sphere_trace(spec, origins, directions, t_far)
    noise = rng.normal(0.0, noise_sigma, size=rays) if noise_sigma > 0 else np.zeros(rays)
    ranges = t + noise
    points = origins + ranges[:, None] * directions
    keep = hit & bounds.contains(points)
    dropped = int(hit.sum() - keep.sum())
    if dropped:
        logging.info("Dropped %d LiDAR returns outside the world bounds", dropped)
    return PointScan(origin=np.asarray(origin, dtype=np.float64), points=points[keep])


def generate_synthetic(
    spec: SceneSpec,
    trajectory: Sequence[Pose],
    camera: CameraIntrinsics,
    lidar_rays_per_scan: int,
    noise_sigma: float,
    seed: int,
    bounds: Optional[Bounds] = None,
    vertical_fov_deg: float = 45.0,
) -> Dataset:
    """Render images and simulate LiDAR scans of an analytic scene.

    One image and one scan are produced per trajectory pose. The result depends
    only on the arguments, so equal seeds give identical datasets.
    """
    if not trajectory:
        raise ValueError("Trajectory must contain at least one pose")
    if bounds is None:
        corners = np.stack([p.translation for p in trajectory])
        bounds = Bounds(corners.min(axis=0) - 1.0, corners.max(axis=0) + 1.0)

    rng = np.random.default_rng(seed)
    t_far = float(np.linalg.norm(bounds.extent)) * 2.0
    images: List[PosedImage] = []
    scans: List[PointScan] = []
    for pose in trajectory:
        pixels = render_reference(spec, camera, pose, t_far)
        images.append(PosedImage(intrinsics=camera, pose=pose, pixels=pixels))
        scans.append(
            simulate_scan(spec, pose.translation, bounds, lidar_rays_per_scan, noise_sigma, rng, vertical_fov_deg)
        )
    logging.info(
        "Generated %d images and %d scan points",
        len(images),
        sum(len(s) for s in scans),
    )
    return Dataset(images=tuple(images), scans=tuple(scans), bounds=bounds)


def inject_dynamic_points(
    dataset: Dataset,
    fraction: float,
    seed: int,
    min_clearance: float,
    spec: Optional[SceneSpec] = None,
) -> Tuple[Dataset, List[np.ndarray]]:
    """Add floating "dynamic object" returns to every scan.

    Each scan gets round(fraction * len(scan)) extra points clustered around a
    random free-space location at least `min_clearance` from any surface
    (checked against `spec` when given).

    Returns:
        (new dataset, per-scan boolean masks marking the injected points)
    """
    rng = np.random.default_rng(seed)
    scans: List[PointScan] = []
    masks: List[np.ndarray] = []
    bounds = dataset.bounds
    for scan in dataset.scans:
        extra = int(round(fraction * len(scan)))
        if extra == 0:
            scans.append(scan)
            masks.append(np.zeros(len(scan), dtype=bool))
            continue
        center = _free_location(rng, scan.origin, bounds, min_clearance, spec)
        cluster = center + rng.normal(0.0, min_clearance / 4.0, size=(extra, 3))
        cluster = np.clip(cluster, bounds.minimum, bounds.maximum)
        scans.append(PointScan(origin=scan.origin, points=np.concatenate([scan.points, cluster])))
        masks.append(np.concatenate([np.zeros(len(scan), dtype=bool), np.ones(extra, dtype=bool)]))
    return Dataset(images=dataset.images, scans=tuple(scans), bounds=bounds), masks


def _free_location(
    rng: np.random.Generator,
    origin: np.ndarray,
    bounds: Bounds,
    clearance: float,
    spec: Optional[SceneSpec],
) -> np.ndarray:
    for _ in range(1000):
        candidate = rng.uniform(bounds.minimum + clearance, bounds.maximum - clearance)
        if np.linalg.norm(candidate - origin) < clearance:
            continue
        if spec is None or analytic_sdf(spec, candidate) > clearance:
            return candidate
    raise ValueError("Could not find free space for a dynamic object cluster")


def downsample_scans(dataset: Dataset, factor: int) -> Dataset:
    """Keep every `factor`-th point of each scan."""
    if factor < 1:
        raise ValueError(f"Downsample factor must be >= 1, got {factor}")
    scans = tuple(PointScan(origin=s.origin, points=s.points[::factor]) for s in dataset.scans)
    return Dataset(images=dataset.images, scans=scans, bounds=dataset.bounds)
