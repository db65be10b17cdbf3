from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np


# Sky colour for rays that never hit the scene.
BACKGROUND_COLOR = (0.6, 0.7, 0.9)
AMBIENT_TERM = 0.1


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )


@dataclass(frozen=True)
class Pose:
    """World-from-sensor rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        check_rotation(rotation)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: Sequence[float]) -> "Pose":
        """Build a pose from 16 row-major numbers of a 4x4 world-from-sensor matrix."""
        mat = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        if not np.allclose(mat[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError(f"Pose matrix bottom row must be 0 0 0 1, got {mat[3].tolist()}")
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    @property
    def position(self) -> np.ndarray:
        return self.translation


def check_rotation(rotation: np.ndarray, tol: float = 1e-6) -> None:
    """Raise ValueError unless `rotation` is orthonormal with determinant +1."""
    if not np.all(np.isfinite(rotation)):
        raise ValueError("Rotation contains non-finite values")
    gram_error = np.abs(rotation @ rotation.T - np.eye(3)).max()
    det = float(np.linalg.det(rotation))
    if gram_error > tol or abs(det - 1.0) > tol:
        raise ValueError(
            f"Rotation is not orthonormal (|R R^T - I|max={gram_error:.3g}, det={det:.6g})"
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class PosedImage:
    intrinsics: CameraIntrinsics
    pose: Pose
    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = np.clip(np.asarray(self.pixels, dtype=np.float64), 0.0, 1.0)
        expected = (self.intrinsics.height, self.intrinsics.width, 3)
        if pixels.shape != expected:
            raise ValueError(f"Image shape {pixels.shape} does not match intrinsics {expected}")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)


@dataclass(frozen=True)
class PointScan:
    origin: np.ndarray
    points: np.ndarray

    def __post_init__(self) -> None:
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)) or not np.all(np.isfinite(origin)):
            raise ValueError("Scan contains non-finite coordinates")
        points.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned box in metres."""

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.minimum, dtype=np.float64).reshape(3)
        hi = np.asarray(self.maximum, dtype=np.float64).reshape(3)
        if np.any(hi <= lo):
            raise ValueError(f"Bounds max {hi.tolist()} must exceed min {lo.tolist()}")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.minimum - tol) & (points <= self.maximum + tol), axis=-1)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.minimum + self.maximum)

    @property
    def extent(self) -> np.ndarray:
        return self.maximum - self.minimum


@dataclass(frozen=True)
class Dataset:
    images: Tuple[PosedImage, ...]
    scans: Tuple[PointScan, ...]
    bounds: Bounds

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "scans", tuple(self.scans))
        for i, image in enumerate(self.images):
            if not self.bounds.contains(image.pose.position)[0]:
                raise ValueError(f"Camera {i} at {image.pose.position.tolist()} lies outside the world bounds")
        for i, scan in enumerate(self.scans):
            if not self.bounds.contains(scan.origin)[0]:
                raise ValueError(f"Scan {i} origin lies outside the world bounds")
            if len(scan) and not np.all(self.bounds.contains(scan.points)):
                raise ValueError(f"Scan {i} has points outside the world bounds")

    @property
    def camera(self) -> CameraIntrinsics:
        if not self.images:
            raise ValueError("Dataset has no images")
        return self.images[0].intrinsics


# ---- Analytic primitives ----

class Primitive(ABC):
    """Analytic shape with an exact signed distance function and a flat albedo."""

    albedo: Tuple[float, float, float]

    @abstractmethod
    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of each row of `points` ([N, 3]) to the shape."""


@dataclass(frozen=True)
class Sphere(Primitive):
    center: Tuple[float, float, float]
    radius: float
    albedo: Tuple[float, float, float] = (0.8, 0.3, 0.2)

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError(f"Sphere radius must be positive, got {self.radius}")

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Box(Primitive):
    center: Tuple[float, float, float]
    half_extents: Tuple[float, float, float]
    albedo: Tuple[float, float, float] = (0.3, 0.6, 0.3)

    def __post_init__(self) -> None:
        if min(self.half_extents) <= 0:
            raise ValueError(f"Box half extents must be positive, got {self.half_extents}")

    def sdf(self, points: np.ndarray) -> np.ndarray:
        q = np.abs(points - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Plane(Primitive):
    """Half-space {x : n.x <= offset}; the surface is n.x = offset."""

    normal: Tuple[float, float, float]
    offset: float
    albedo: Tuple[float, float, float] = (0.7, 0.7, 0.7)

    def __post_init__(self) -> None:
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError(f"Plane normal must be unit length, got {self.normal}")

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return points @ np.asarray(self.normal, dtype=np.float64) - self.offset


@dataclass(frozen=True)
class SceneSpec:
    primitives: Tuple[Primitive, ...]
    light_direction: Tuple[float, float, float] = (0.3, -0.4, 0.866)

    def __post_init__(self) -> None:
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise ValueError("Scene needs at least one primitive")
        light = np.asarray(self.light_direction, dtype=np.float64)
        object.__setattr__(self, "light_direction", tuple(light / np.linalg.norm(light)))


def analytic_sdf(spec: SceneSpec, x: np.ndarray) -> np.ndarray:
    """Exact signed distance to the union of the scene primitives.

    Accepts a single 3-vector (returns a float array of shape ()) or an [N, 3]
    array.
    """
    points = np.asarray(x, dtype=np.float64)
    single = points.ndim == 1
    points = np.atleast_2d(points)
    distances = np.stack([p.sdf(points) for p in spec.primitives], axis=0)
    result = distances.min(axis=0)
    return result[0] if single else result


def nearest_primitive(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    distances = np.stack([p.sdf(np.atleast_2d(points)) for p in spec.primitives], axis=0)
    return distances.argmin(axis=0)


def analytic_normal(spec: SceneSpec, points: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    grad = np.zeros_like(points)
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = eps
        grad[:, axis] = analytic_sdf(spec, points + offset) - analytic_sdf(spec, points - offset)
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    return grad / np.maximum(norm, 1e-12)


# ---- Camera model ----

def pixel_rays(image_or_intrinsics, pose: Pose | None, us: np.ndarray, vs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised pinhole rays through pixel centres.

    Args:
        image_or_intrinsics: a PosedImage, or CameraIntrinsics together with `pose`
        pose: world-from-camera pose when intrinsics are passed directly
        us, vs: integer pixel coordinates (same shape)

    Returns:
        (origins [N, 3], unit directions [N, 3]) in world frame. The camera looks
        down +z with x right and y down.
    """
    if isinstance(image_or_intrinsics, PosedImage):
        intrinsics, pose = image_or_intrinsics.intrinsics, image_or_intrinsics.pose
    else:
        intrinsics = image_or_intrinsics
    if pose is None:
        raise ValueError("A pose is required when passing intrinsics")
    us = np.asarray(us, dtype=np.float64).reshape(-1)
    vs = np.asarray(vs, dtype=np.float64).reshape(-1)
    if np.any(us < 0) or np.any(us >= intrinsics.width) or np.any(vs < 0) or np.any(vs >= intrinsics.height):
        raise ValueError(f"Pixel outside image {intrinsics.width}x{intrinsics.height}")
    cam = np.stack(
        [
            (us + 0.5 - intrinsics.cx) / intrinsics.fx,
            (vs + 0.5 - intrinsics.cy) / intrinsics.fy,
            np.ones_like(us),
        ],
        axis=-1,
    )
    directions = cam @ pose.rotation.T
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, directions.shape).copy()
    return origins, directions


def pixel_ray(image: PosedImage, u: float, v: float) -> Ray:
    origins, directions = pixel_rays(image, None, np.array([u]), np.array([v]))
    return Ray(origin=origins[0], direction=directions[0])


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("look_at: view direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), eye)


def orbit_trajectory(
    target: Sequence[float],
    radius: float,
    height: float,
    count: int,
    phase: float = 0.0,
) -> List[Pose]:
    """Cameras evenly spaced on a horizontal circle, all looking at `target`."""
    target = np.asarray(target, dtype=np.float64)
    poses = []
    for i in range(count):
        angle = phase + 2.0 * np.pi * i / count
        eye = target + np.array([radius * np.cos(angle), radius * np.sin(angle), 0.0])
        eye[2] = height
        poses.append(look_at(eye, target))
    return poses


def desk_scene() -> Tuple[SceneSpec, Bounds]:
    """Sphere resting on a ground plane inside a 2 m box."""
    spec = SceneSpec(
        primitives=(
            Sphere(center=(0.0, 0.0, 0.5), radius=0.5, albedo=(0.8, 0.35, 0.25)),
            Plane(normal=(0.0, 0.0, 1.0), offset=0.0, albedo=(0.65, 0.65, 0.6)),
        ),
    )
    bounds = Bounds(minimum=np.array([-1.0, -1.0, -0.2]), maximum=np.array([1.0, 1.0, 1.4]))
    return spec, bounds
