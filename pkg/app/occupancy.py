from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.dataset_io import atomic_write, write_ply_points
from app.scene import Bounds, PointScan, PosedImage, Ray, pixel_rays


class CellState(IntEnum):
    """Cell labels, ordered so that the stronger observation has the larger value."""

    INVISIBLE_UNKNOWN = 0
    VISIBLE_UNKNOWN = 1
    FREE = 2
    OCCUPIED = 3


ENCODED_STATES = (CellState.OCCUPIED, CellState.VISIBLE_UNKNOWN)

# (cell index, t_entry, t_exit)
Traversal = List[Tuple[Tuple[int, int, int], float, float]]


class GridFormatError(ValueError):
    """Raised when a serialized occupancy grid cannot be decoded."""


@dataclass(frozen=True)
class OccupancyGrid:
    origin: np.ndarray
    voxel_size: float
    dims: Tuple[int, int, int]
    cells: np.ndarray
    skipped_points: int = 0

    def __post_init__(self) -> None:
        if self.voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"Grid dims must be three integers >= 1, got {self.dims}")
        cells = np.asarray(self.cells, dtype=np.uint8)
        if cells.shape != dims:
            raise ValueError(f"Cell array shape {cells.shape} does not match dims {dims}")
        cells.setflags(write=False)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def empty(cls, bounds: Bounds, voxel_size: float) -> "OccupancyGrid":
        """All-InvisibleUnknown grid whose cells cover `bounds`."""
        if voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        dims = tuple(max(1, int(np.ceil(e / voxel_size - 1e-9))) for e in bounds.extent)
        return cls(bounds.minimum, voxel_size, dims, np.zeros(dims, dtype=np.uint8))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.voxel_size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.origin + self.upper)

    @property
    def radius(self) -> float:
        """Half-diagonal of the grid box; the map radius used by scene contraction."""
        return float(0.5 * np.linalg.norm(self.upper - self.origin))

    def with_cells(self, cells: np.ndarray) -> "OccupancyGrid":
        return OccupancyGrid(self.origin, self.voxel_size, self.dims, cells, self.skipped_points)

    def cell_of(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Integer cell indices ([N, 3]) and an in-grid mask for world points."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx = np.floor((points - self.origin) / self.voxel_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)
        return idx, inside

    def cell_centers(self, indices: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(indices, dtype=np.float64) + 0.5) * self.voxel_size


def state_at(grid: OccupancyGrid, points: np.ndarray) -> np.ndarray:
    """Cell state for each point; points outside the grid read as InvisibleUnknown."""
    idx, inside = grid.cell_of(points)
    states = np.full(len(idx), CellState.INVISIBLE_UNKNOWN, dtype=np.uint8)
    if inside.any():
        i = idx[inside]
        states[inside] = grid.cells[i[:, 0], i[:, 1], i[:, 2]]
    return states


def encoded_mask(grid: OccupancyGrid) -> np.ndarray:
    """Boolean array (grid.dims) of cells that carry the neural field."""
    return (grid.cells == CellState.OCCUPIED) | (grid.cells == CellState.VISIBLE_UNKNOWN)


def encoded_indices(grid: OccupancyGrid) -> np.ndarray:
    return np.argwhere(encoded_mask(grid))


# ---- traversal ----

def box_interval(grid: OccupancyGrid, origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Slab test: parametric [t_near, t_far] of each ray against the grid box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (grid.origin - origins) / directions
        t_hi = (grid.upper - origins) / directions
    parallel = directions == 0.0
    inside_slab = (origins >= grid.origin) & (origins <= grid.upper)
    t_lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), t_lo)
    t_hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), t_hi)
    t_near = np.minimum(t_lo, t_hi).max(axis=-1)
    t_far = np.maximum(t_lo, t_hi).min(axis=-1)
    return t_near, t_far


# Called with (ray ids, flat cell ids, t_entry, t_exit); returns a mask of rays to stop.
CellVisitor = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], Optional[np.ndarray]]


def march(
    grid: OccupancyGrid,
    origins: np.ndarray,
    directions: np.ndarray,
    t_start: Union[float, np.ndarray],
    t_end: Union[float, np.ndarray],
    visit: CellVisitor,
) -> None:
    """Amanatides-Woo voxel walk of many rays in lockstep.

    Every ray advances one cell per iteration; `visit` sees each non-empty
    (cell, interval) in increasing t order per ray and may stop rays early.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    count = len(origins)
    if count == 0:
        return
    t_near, t_far = box_interval(grid, origins, directions)
    t_cur = np.maximum(t_near, np.broadcast_to(t_start, (count,)))
    t_stop = np.minimum(t_far, np.broadcast_to(t_end, (count,)))
    active = t_cur < t_stop
    if not active.any():
        return

    dims = np.asarray(grid.dims)
    voxel = grid.voxel_size
    entry = origins + np.where(np.isfinite(t_cur), t_cur, 0.0)[:, None] * directions
    cell = np.clip(np.floor((entry - grid.origin) / voxel).astype(np.int64), 0, dims - 1)
    step = np.sign(directions).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = grid.origin + (cell + (step > 0)) * voxel
        t_max = np.where(step != 0, (boundary - origins) / directions, np.inf)
        t_delta = np.where(step != 0, voxel / np.abs(directions), np.inf)

    strides = np.array([dims[1] * dims[2], dims[2], 1])
    rows = np.arange(count)
    # Each ray crosses at most sum(dims) cell faces.
    for _ in range(int(dims.sum()) + 3):
        ids = rows[active]
        if len(ids) == 0:
            break
        axis = np.argmin(t_max[ids], axis=-1)
        t_next = t_max[ids, axis]
        t_in = t_cur[ids]
        t_out = np.minimum(t_next, t_stop[ids])
        nonempty = t_out > t_in
        if nonempty.any():
            hit = ids[nonempty]
            stop = visit(hit, cell[hit] @ strides, t_in[nonempty], t_out[nonempty])
            if stop is not None and np.any(stop):
                active[hit[stop]] = False
        finished = t_next >= t_stop[ids]
        t_cur[ids] = np.maximum(t_out, t_in)
        cell[ids, axis] += step[ids, axis]
        t_max[ids, axis] += t_delta[ids, axis]
        left = np.any((cell[ids] < 0) | (cell[ids] >= dims), axis=-1)
        active[ids[finished | left]] = False


def raycast_dda(grid: OccupancyGrid, ray: Ray, t_max: float, t_min: float = 0.0) -> Traversal:
    """Cells intersected by ray(t) for t in [t_min, t_max], in increasing t order.

    Returns:
        List of (cell index, t_entry, t_exit); empty if the ray misses the grid.
    """
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    dims = grid.dims
    out: Traversal = []

    def collect(ids, flat, t_in, t_out):
        for f, a, b in zip(flat.tolist(), t_in.tolist(), t_out.tolist()):
            i, rem = divmod(f, dims[1] * dims[2])
            j, k = divmod(rem, dims[2])
            out.append(((i, j, k), a, b))
        return None

    march(grid, ray.origin, ray.direction, t_min, t_max, collect)
    return out


def next_encoded_entries(
    grid: OccupancyGrid,
    origins: np.ndarray,
    directions: np.ndarray,
    t: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Vectorised next_encoded_entry; NaN where the ray leaves the grid first.

    `mask` overrides the encoded set (flattened boolean over cells) when given.
    """
    flat_mask = (encoded_mask(grid) if mask is None else mask).ravel()
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(np.atleast_2d(origins)),))
    result = np.full(len(t), np.nan)

    def stop_on_encoded(ids, flat, t_in, t_out):
        found = flat_mask[flat]
        result[ids[found]] = t_in[found]
        return found

    march(grid, origins, directions, t, np.inf, stop_on_encoded)
    return result


def next_encoded_entry(grid: OccupancyGrid, ray: Ray, t: float) -> Optional[float]:
    """Smallest t' >= t at which the ray is inside an Occupied or VisibleUnknown cell."""
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    value = next_encoded_entries(grid, ray.origin[None], ray.direction[None], np.array([t]))[0]
    return None if np.isnan(value) else float(value)


def grid_exit(grid: OccupancyGrid, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Parametric distance at which each ray leaves the grid box (NaN on a miss)."""
    t_near, t_far = box_interval(grid, np.atleast_2d(origins), np.atleast_2d(directions))
    return np.where((t_far > np.maximum(t_near, 0.0)), t_far, np.nan)


# ---- construction ----

def _chunks(count: int, workers: int) -> List[slice]:
    parts = max(1, min(workers, count))
    edges = np.linspace(0, count, parts + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_phase(workers: int, count: int, job: Callable[[slice], np.ndarray], dims) -> np.ndarray:
    """Run `job` over ray chunks and merge the per-chunk state arrays with max."""
    merged = np.zeros(dims, dtype=np.uint8)
    chunks = _chunks(count, workers)
    if workers <= 1 or len(chunks) <= 1:
        for part in chunks:
            np.maximum(merged, job(part), out=merged)
        return merged
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for result in pool.map(job, chunks):
            np.maximum(merged, result, out=merged)
    return merged


def build_grid(scans: Sequence[PointScan], bounds: Bounds, voxel_size: float, workers: int = 1) -> OccupancyGrid:
    """Ray-cast every scan point into a fresh grid covering `bounds`.

    Endpoint cells become Occupied, cells on the way become Free, and a Free
    label never replaces Occupied. Points outside the grid are skipped and
    counted in `skipped_points`.
    """
    grid = OccupancyGrid.empty(bounds, voxel_size)
    if not scans:
        return grid

    origins = np.concatenate([np.broadcast_to(s.origin, s.points.shape) for s in scans])
    points = np.concatenate([s.points for s in scans])
    idx, inside = grid.cell_of(points)
    skipped = int((~inside).sum())
    if skipped:
        logging.warning("Skipped %d scan points outside the occupancy grid", skipped)
    origins, points, idx = origins[inside], points[inside], idx[inside]

    occupied = np.zeros(grid.dims, dtype=np.uint8)
    occupied[idx[:, 0], idx[:, 1], idx[:, 2]] = CellState.OCCUPIED

    segment = points - origins
    length = np.linalg.norm(segment, axis=-1)
    valid = length > 0
    origins, directions, length = origins[valid], segment[valid] / length[valid, None], length[valid]

    def carve(part: slice) -> np.ndarray:
        free = np.zeros(grid.dims, dtype=np.uint8)
        flat_free = free.reshape(-1)

        def mark(ids, flat, t_in, t_out):
            flat_free[flat] = CellState.FREE
            return None

        march(grid, origins[part], directions[part], 0.0, length[part], mark)
        return free

    free = _run_phase(workers, len(origins), carve, grid.dims)
    cells = np.maximum(occupied, free)
    logging.info(
        "Occupancy grid %s: %d occupied, %d free cells from %d points",
        grid.dims,
        int((cells == CellState.OCCUPIED).sum()),
        int((cells == CellState.FREE).sum()),
        len(points),
    )
    return OccupancyGrid(grid.origin, grid.voxel_size, grid.dims, cells, skipped)


def classify_visible(
    grid: OccupancyGrid,
    images: Sequence[PosedImage],
    ray_stride: int = 4,
    workers: int = 1,
) -> OccupancyGrid:
    """Promote unknown cells seen by a camera ray before its first Occupied cell.

    Free and Occupied cells are left as they are; rays that never meet an
    Occupied cell mark every unknown cell up to the grid boundary.
    """
    if ray_stride < 1:
        raise ValueError(f"ray_stride must be >= 1, got {ray_stride}")
    if not images:
        return grid

    origins_list, dirs_list = [], []
    for image in images:
        vs, us = np.mgrid[0:image.intrinsics.height:ray_stride, 0:image.intrinsics.width:ray_stride]
        o, d = pixel_rays(image, None, us.ravel(), vs.ravel())
        origins_list.append(o)
        dirs_list.append(d)
    origins = np.concatenate(origins_list)
    directions = np.concatenate(dirs_list)
    flat_cells = grid.cells.reshape(-1)

    def walk(part: slice) -> np.ndarray:
        seen = np.zeros(grid.dims, dtype=np.uint8)
        flat_seen = seen.reshape(-1)

        def mark(ids, flat, t_in, t_out):
            state = flat_cells[flat]
            unknown = state == CellState.INVISIBLE_UNKNOWN
            flat_seen[flat[unknown]] = CellState.VISIBLE_UNKNOWN
            return state == CellState.OCCUPIED

        march(grid, origins[part], directions[part], 0.0, np.inf, mark)
        return seen

    seen = _run_phase(workers, len(origins), walk, grid.dims)
    cells = np.maximum(grid.cells, seen)
    promoted = int(((cells == CellState.VISIBLE_UNKNOWN) & (grid.cells == CellState.INVISIBLE_UNKNOWN)).sum())
    logging.info("Visibility pass: %d camera rays promoted %d cells to visible-unknown", len(origins), promoted)
    return grid.with_cells(cells)


# ---- serialization ----

_MAGIC = b"M2MAPOCC"
_VERSION = 1
_HEADER = np.dtype(
    [
        ("magic", "S8"),
        ("version", "<u4"),
        ("origin", "<f8", (3,)),
        ("voxel_size", "<f8"),
        ("dims", "<u4", (3,)),
        ("skipped", "<u8"),
    ]
)


def save_grid(grid: OccupancyGrid, path: Union[str, Path]) -> None:
    """Header (magic, version, origin, voxel_size, dims) then one byte per cell, C order."""
    header = np.zeros((), dtype=_HEADER)
    header["magic"] = _MAGIC
    header["version"] = _VERSION
    header["origin"] = grid.origin
    header["voxel_size"] = grid.voxel_size
    header["dims"] = grid.dims
    header["skipped"] = grid.skipped_points
    with atomic_write(path) as handle:
        handle.write(header.tobytes())
        handle.write(np.ascontiguousarray(grid.cells).tobytes())


def load_grid(path: Union[str, Path]) -> OccupancyGrid:
    path = Path(path)
    if not path.is_file():
        raise GridFormatError(f"Grid file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.itemsize:
        raise GridFormatError(f"{path}: truncated header")
    header = np.frombuffer(raw[:_HEADER.itemsize], dtype=_HEADER)[0]
    if bytes(header["magic"]) != _MAGIC:
        raise GridFormatError(f"{path}: not an occupancy grid file")
    if int(header["version"]) != _VERSION:
        raise GridFormatError(f"{path}: unsupported grid version {int(header['version'])}")
    dims = tuple(int(d) for d in header["dims"])
    body = np.frombuffer(raw[_HEADER.itemsize:], dtype=np.uint8)
    if body.size != int(np.prod(dims)):
        raise GridFormatError(f"{path}: expected {int(np.prod(dims))} cells, found {body.size}")
    if body.size and body.max() > max(CellState):
        raise GridFormatError(f"{path}: invalid cell state {int(body.max())}")
    return OccupancyGrid(
        origin=np.array(header["origin"]),
        voxel_size=float(header["voxel_size"]),
        dims=dims,
        cells=body.reshape(dims).copy(),
        skipped_points=int(header["skipped"]),
    )


def export_state_clouds(grid: OccupancyGrid, directory: Union[str, Path]) -> List[Path]:
    """One PLY of cell centres per state, for inspection in a point viewer."""
    directory = Path(directory)
    written = []
    for state in CellState:
        path = directory / f"{state.name.lower()}.ply"
        write_ply_points(path, grid.cell_centers(np.argwhere(grid.cells == state)))
        written.append(path)
    return written
