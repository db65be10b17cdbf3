"""
Zero-level-set extraction and mesh IO.

The SDF is sampled on a lattice of `resolution` cells per axis spanning the
occupancy grid. Only cubes whose eight corners fall in encoded occupancy
cells (dilated by one cell) are polygonised, so the mesh covers the region
the field was trained on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np
import trimesh
from scipy import ndimage
from skimage import measure

from app.dataset_io import atomic_path
from app.field import FieldParameters, eval_sdf_only
from app.occupancy import OccupancyGrid, encoded_mask
from app.scene import Bounds, SceneSpec, analytic_normal, analytic_sdf


SdfFn = Callable[[np.ndarray], np.ndarray]
MESH_SUFFIXES = (".obj", ".ply")
_EVAL_CHUNK = 65536


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self) -> None:
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError("Triangle indices out of range")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(self.vertices, self.triangles, process=False)


def _as_sdf_fn(field: Union[FieldParameters, SdfFn]) -> SdfFn:
    if isinstance(field, FieldParameters):
        return lambda x: eval_sdf_only(field, x)
    return field


def _lattice(grid: OccupancyGrid, resolution: int):
    """Vertex coordinates per axis spanning the grid box with `resolution` cells each."""
    return [np.linspace(grid.origin[a], grid.upper[a], resolution + 1) for a in range(3)]


def _cube_mask(grid: OccupancyGrid, axes) -> np.ndarray:
    """Per-cube flag: all eight lattice corners lie in the dilated encoded region."""
    region = ndimage.binary_dilation(encoded_mask(grid), structure=np.ones((3, 3, 3), dtype=bool))
    cells = [
        np.clip(np.floor((axes[a] - grid.origin[a]) / grid.voxel_size).astype(np.int64), 0, grid.dims[a] - 1)
        for a in range(3)
    ]
    vertex_in = region[np.ix_(cells[0], cells[1], cells[2])]
    cube = vertex_in[:-1, :-1, :-1].copy()
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                cube &= vertex_in[di:di + cube.shape[0], dj:dj + cube.shape[1], dk:dk + cube.shape[2]]
    return cube


def marching_cubes(
    field: Union[FieldParameters, SdfFn],
    grid: OccupancyGrid,
    resolution: int,
    restrict_to_encoded: bool = True,
) -> TriangleMesh:
    """
    Extract the zero level set of an SDF inside the occupancy grid.

    Args:
        field: trained parameters or any callable mapping [N, 3] points to s
        grid: occupancy grid providing the box and the encoded region
        resolution: lattice cells per axis (>= 2)
        restrict_to_encoded: polygonise only cubes inside the dilated encoded cells

    Returns:
        TriangleMesh with outward winding (s increases along the face normal);
        empty when no zero crossing is found
    """
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    sdf = _as_sdf_fn(field)
    axes = _lattice(grid, resolution)
    shape = tuple(len(a) for a in axes)

    if restrict_to_encoded:
        cubes = _cube_mask(grid, axes)
        vertices_used = np.zeros(shape, dtype=bool)
        for di in (0, 1):
            for dj in (0, 1):
                for dk in (0, 1):
                    vertices_used[di:di + resolution, dj:dj + resolution, dk:dk + resolution] |= cubes
    else:
        cubes = np.ones((resolution,) * 3, dtype=bool)
        vertices_used = np.ones(shape, dtype=bool)

    values = np.ones(shape, dtype=np.float64)
    index = np.argwhere(vertices_used)
    for start in range(0, len(index), _EVAL_CHUNK):
        part = index[start:start + _EVAL_CHUNK]
        points = np.stack([axes[a][part[:, a]] for a in range(3)], axis=-1)
        values[part[:, 0], part[:, 1], part[:, 2]] = sdf(points)

    used = values[vertices_used]
    if used.size == 0 or not (used.min() < 0.0 < used.max()):
        logging.warning("Marching cubes: no zero crossing in %d evaluated vertices, returning an empty mesh", used.size)
        return TriangleMesh.empty()

    # skimage tests the mask at each cube's lowest corner.
    mask = np.zeros(shape, dtype=bool)
    mask[:-1, :-1, :-1] = cubes
    spacing = tuple(float(a[1] - a[0]) for a in axes)
    try:
        verts, faces, _, _ = measure.marching_cubes(
            values, level=0.0, spacing=spacing, gradient_direction="ascent", allow_degenerate=False, mask=mask
        )
    except (ValueError, RuntimeError) as e:
        logging.warning("Marching cubes failed (%s), returning an empty mesh", e)
        return TriangleMesh.empty()
    verts = verts + grid.origin[None, :]

    mesh = TriangleMesh(verts, faces)
    keep = mesh.face_areas() > 1e-12 * min(spacing) ** 2
    if not keep.all():
        mesh = TriangleMesh(verts, faces[keep])
    logging.info("Extracted mesh: %d vertices, %d triangles", len(mesh.vertices), len(mesh.triangles))
    return mesh


def analytic_mesh(spec: SceneSpec, bounds: Bounds, resolution: int = 128) -> TriangleMesh:
    """Ground-truth mesh of an analytic scene, vertices projected onto the exact surface."""
    voxel = float(np.max(bounds.extent)) / resolution
    grid = OccupancyGrid.empty(bounds, voxel)
    mesh = marching_cubes(lambda x: analytic_sdf(spec, x), grid, resolution, restrict_to_encoded=False)
    if mesh.is_empty:
        return mesh
    return TriangleMesh(project_to_surface(spec, mesh.vertices), mesh.triangles)


def project_to_surface(spec: SceneSpec, points: np.ndarray, steps: int = 3) -> np.ndarray:
    """Newton projection x <- x - s(x) n(x) onto the analytic zero level set."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64)).copy()
    for _ in range(steps):
        s = analytic_sdf(spec, points)
        points -= s[:, None] * analytic_normal(spec, points)
    return points


# ---- sampling ----

def sample_surface_points(mesh: TriangleMesh, count: int = 100_000, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise ValueError("Cannot sample points from an empty mesh")
    points, _ = trimesh.sample.sample_surface(mesh.to_trimesh(), count, seed=seed)
    return np.asarray(points, dtype=np.float64)


def analytic_surface_points(spec: SceneSpec, bounds: Bounds, count: int = 100_000, seed: int = 0, resolution: int = 128) -> np.ndarray:
    """Samples of the analytic surface inside `bounds`, projected onto the exact zero level set."""
    points = sample_surface_points(analytic_mesh(spec, bounds, resolution), count, seed)
    points = project_to_surface(spec, points)
    return points[bounds.contains(points, tol=1e-6)]


# ---- IO ----

def save_mesh(mesh: TriangleMesh, path: Union[str, Path]) -> Path:
    """OBJ or binary PLY by suffix, with per-vertex normals."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in MESH_SUFFIXES:
        raise ValueError(f"Unsupported mesh format '{suffix}' (use {MESH_SUFFIXES})")
    tm = mesh.to_trimesh()
    with atomic_path(path) as tmp:
        if suffix == ".ply":
            tm.export(str(tmp), file_type="ply", encoding="binary", vertex_normal=not mesh.is_empty)
        else:
            tm.export(str(tmp), file_type="obj", include_normals=not mesh.is_empty)
    return path


def load_mesh(path: Union[str, Path]) -> TriangleMesh:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Mesh file not found: {path}")
    loaded = trimesh.load(str(path), force="mesh", process=False)
    if isinstance(loaded, trimesh.Scene):
        if not loaded.geometry:
            return TriangleMesh.empty()
        loaded = trimesh.util.concatenate(tuple(loaded.geometry.values()))
    return TriangleMesh(np.asarray(loaded.vertices), np.asarray(loaded.faces))


def mesh_points(path_or_mesh: Union[str, Path, TriangleMesh], count: int = 100_000, seed: int = 0) -> np.ndarray:
    mesh = path_or_mesh if isinstance(path_or_mesh, TriangleMesh) else load_mesh(path_or_mesh)
    return sample_surface_points(mesh, count, seed)
