"""
Fixture builders and brute-force oracles shared by the test modules.
"""

from typing import Callable, List, Optional, Set, Tuple

import numpy as np

from app.encoding import HashEncodingConfig, spatial_hash
from app.field import FieldConfig, FieldDomain, FieldParameters, init_field
from app.occupancy import CellState, OccupancyGrid
from app.scene import (
    Bounds,
    CameraIntrinsics,
    Dataset,
    SceneSpec,
    Sphere,
    desk_scene,
    orbit_trajectory,
)
from app.synthetic import generate_synthetic


# ---- fields ----

def tiny_encoding() -> HashEncodingConfig:
    """Three levels at resolutions 4, 8, 16 with a small table."""
    return HashEncodingConfig(levels=3, base_resolution=4, max_resolution=16, table_size=2 ** 10, feature_dim=2)


def tiny_field_config(dtype: str = "float64", **overrides) -> FieldConfig:
    values = dict(encoding=tiny_encoding(), hidden_width=8, hidden_layers=1, dtype=dtype, sphere_init_iterations=0)
    values.update(overrides)
    return FieldConfig(**values)


UNIT_DOMAIN = FieldDomain(center=(0.0, 0.0, 0.0), map_radius=1.0, boundary=0.1)


def tiny_params(seed: int = 0, dtype: str = "float64", domain: FieldDomain = UNIT_DOMAIN, **overrides) -> FieldParameters:
    params = init_field(tiny_field_config(dtype, **overrides), domain, seed)
    params.sphere_blend = 0.0
    return params


def randomize(params: FieldParameters, seed: int, table_scale: float = 0.5) -> FieldParameters:
    """Give the hash tables non-trivial content so gradients are not vanishing."""
    rng = np.random.default_rng(seed)
    for tensor in (params.geometry_hash, params.appearance_hash):
        tensor.data = rng.uniform(-table_scale, table_scale, size=tensor.shape).astype(tensor.dtype)
    for layers in (params.geometry_mlp, params.appearance_mlp):
        for weight, bias in layers:
            weight.data = rng.normal(0.0, 0.5, size=weight.shape).astype(weight.dtype)
            bias.data = rng.normal(0.0, 0.1, size=bias.shape).astype(bias.dtype)
    return params


def sphere_prior_params(radius: float = 0.5, dtype: str = "float64") -> FieldParameters:
    """Field whose SDF is exactly |x| - radius: network output zeroed, sphere prior fully on."""
    params = tiny_params(dtype=dtype, init_radius=radius)
    weight, bias = params.geometry_mlp[-1]
    weight.data = np.zeros_like(weight.data)
    bias.data = np.zeros_like(bias.data)
    params.sphere_blend = 1.0
    return params


def trilinear_oracle(table: np.ndarray, resolution: int, x: np.ndarray) -> np.ndarray:
    """Direct 8-corner weighted sum of hashed entries for one level ([B, 3] -> [B, F])."""
    out = np.zeros((len(x), table.shape[-1]))
    for b, point in enumerate(x):
        scaled = np.clip(point, 0.0, 1.0) * resolution
        base = np.minimum(np.floor(scaled).astype(np.int64), resolution - 1)
        frac = scaled - base
        for di in (0, 1):
            for dj in (0, 1):
                for dk in (0, 1):
                    corner = base + np.array([di, dj, dk])
                    weight = 1.0
                    for axis, bit in enumerate((di, dj, dk)):
                        weight *= frac[axis] if bit else 1.0 - frac[axis]
                    out[b] += weight * table[int(spatial_hash(corner[None], table.shape[0])[0])]
    return out


# ---- geometry callables for the samplers ----

GeometryFn = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


def sphere_geometry(center=(0.0, 0.0, 0.0), radius: float = 0.5, beta: float = 1e-3) -> GeometryFn:
    center = np.asarray(center, dtype=np.float64)

    def geometry(points: np.ndarray):
        s = np.linalg.norm(points - center, axis=-1) - radius
        return s, np.full(len(points), beta)

    return geometry


def box_geometry(half_extents=(0.3, 0.2, 0.4), beta: float = 1e-3) -> GeometryFn:
    half = np.asarray(half_extents, dtype=np.float64)

    def geometry(points: np.ndarray):
        q = np.abs(points) - half
        s = np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)
        return s, np.full(len(points), beta)

    return geometry


def slab_geometry(center_x: float = 0.2, half_width: float = 0.01, beta: float = 1e-3) -> GeometryFn:
    """Thin slab |x - center_x| <= half_width."""

    def geometry(points: np.ndarray):
        s = np.abs(points[:, 0] - center_x) - half_width
        return s, np.full(len(points), beta)

    return geometry


def constant_geometry(value: float = 5.0, beta: float = 1e-2) -> GeometryFn:
    def geometry(points: np.ndarray):
        return np.full(len(points), value), np.full(len(points), beta)

    return geometry


def fine_march_crossings(geometry: GeometryFn, origin: np.ndarray, direction: np.ndarray, t0: float, t1: float, step: float) -> np.ndarray:
    """t of every sign change of s found by uniform marching with spacing `step`."""
    ts = np.arange(t0, t1 + step, step)
    s, _ = geometry(origin[None, :] + ts[:, None] * direction[None, :])
    change = np.flatnonzero(np.sign(s[:-1]) != np.sign(s[1:]))
    return ts[change]


# ---- grids ----

def grid_with_cells(cells: np.ndarray, voxel_size: float = 1.0, origin=(0.0, 0.0, 0.0)) -> OccupancyGrid:
    cells = np.asarray(cells, dtype=np.uint8)
    return OccupancyGrid(np.asarray(origin, dtype=np.float64), voxel_size, cells.shape, cells)


def all_encoded_grid(bounds: Bounds, voxel_size: float) -> OccupancyGrid:
    grid = OccupancyGrid.empty(bounds, voxel_size)
    return grid.with_cells(np.full(grid.dims, CellState.OCCUPIED, dtype=np.uint8))


def segment_cells(grid: OccupancyGrid, origin: np.ndarray, direction: np.ndarray, t_min: float, t_max: float, tol: float = 1e-9) -> Set[Tuple[int, int, int]]:
    """Cells whose box overlaps origin + t*direction, t in [t_min, t_max], by more than `tol` in t."""
    idx = np.indices(grid.dims).reshape(3, -1).T
    lo = grid.origin + idx * grid.voxel_size
    hi = lo + grid.voxel_size
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - origin) / direction
        t_hi = (hi - origin) / direction
    parallel = direction == 0.0
    inside = (origin >= lo) & (origin <= hi)
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), t_hi)
    t_in = np.maximum(np.minimum(t_lo, t_hi).max(axis=-1), t_min)
    t_out = np.minimum(np.maximum(t_lo, t_hi).min(axis=-1), t_max)
    hit = t_out - t_in > tol
    return {tuple(int(v) for v in cell) for cell in idx[hit]}


def oracle_build(grid: OccupancyGrid, origins: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Brute-force cell states from scan rays: Free along every segment, Occupied at every endpoint."""
    cells = np.zeros(grid.dims, dtype=np.uint8)
    for origin, point in zip(origins, points):
        offset = point - origin
        length = float(np.linalg.norm(offset))
        if length == 0.0:
            continue
        for cell in segment_cells(grid, origin, offset / length, 0.0, length):
            cells[cell] = max(cells[cell], CellState.FREE)
    idx, inside = grid.cell_of(points)
    for i, j, k in idx[inside]:
        cells[i, j, k] = CellState.OCCUPIED
    return cells


# ---- scenes and datasets ----

def sphere_scene(radius: float = 0.5, center=(0.0, 0.0, 0.0)) -> SceneSpec:
    return SceneSpec(primitives=(Sphere(center=tuple(center), radius=radius),))


def small_camera(size: int = 16, focal: float = 14.0) -> CameraIntrinsics:
    return CameraIntrinsics(fx=focal, fy=focal, cx=size / 2.0, cy=size / 2.0, width=size, height=size)


def desk_dataset(
    views: int = 3,
    size: int = 16,
    rays: int = 300,
    noise: float = 0.0,
    seed: int = 0,
    camera: Optional[CameraIntrinsics] = None,
) -> Tuple[SceneSpec, Dataset]:
    spec, bounds = desk_scene()
    trajectory = orbit_trajectory((0.0, 0.0, 0.4), 0.9, 1.1, views)
    camera = camera or small_camera(size)
    return spec, generate_synthetic(spec, trajectory, camera, rays, noise, seed, bounds)


def fibonacci_directions(count: int) -> np.ndarray:
    """Near-uniform unit vectors on the sphere."""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def random_unit(rng: np.random.Generator, count: int) -> np.ndarray:
    v = rng.normal(size=(count, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def cells_of(traversal: List) -> List[Tuple[int, int, int]]:
    return [cell for cell, _, _ in traversal]
