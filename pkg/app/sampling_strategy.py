from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from app.occupancy import OccupancyGrid, grid_exit
from app.scene import Ray


# x [N, 3] -> (s [N], beta [N]); evaluated without recording a graph.
GeometryFn = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]

# Above this share of non-converged rays a batch is reported.
NON_CONVERGED_WARN_FRACTION = 0.005


@dataclass(frozen=True)
class SamplerConfig:
    gamma: float = 0.7
    eps_T: float = 1e-3
    delta_min: Optional[float] = None  # voxel_size / 100 when unset
    max_steps: int = 512
    n_background: int = 8
    boundary: Optional[float] = None  # voxel_size when unset
    far_factor: float = 4.0
    uniform_samples: int = 128

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.eps_T < 1.0:
            raise ValueError(f"eps_T must lie in (0, 1), got {self.eps_T}")
        if self.delta_min is not None and self.delta_min <= 0:
            raise ValueError(f"delta_min must be positive, got {self.delta_min}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.n_background < 0:
            raise ValueError(f"n_background must be >= 0, got {self.n_background}")
        if self.boundary is not None and self.boundary <= 0:
            raise ValueError(f"boundary must be positive, got {self.boundary}")
        if self.far_factor <= 1.0:
            raise ValueError(f"far_factor must exceed 1, got {self.far_factor}")
        if self.uniform_samples < 2:
            raise ValueError(f"uniform_samples must be >= 2, got {self.uniform_samples}")

    def resolve(self, voxel_size: float) -> "SamplerConfig":
        """Fill the voxel-dependent defaults (delta_min, boundary) for a grid."""
        return replace(
            self,
            delta_min=voxel_size / 100.0 if self.delta_min is None else self.delta_min,
            boundary=voxel_size if self.boundary is None else self.boundary,
        )


@dataclass(frozen=True)
class RaySamples:
    """Samples of one ray, in increasing t."""

    ray: Ray
    t: np.ndarray
    positions: np.ndarray
    s: np.ndarray
    beta: np.ndarray
    slope: np.ndarray
    delta: np.ndarray
    background: np.ndarray
    converged: bool = True

    def __len__(self) -> int:
        return len(self.t)

    @property
    def foreground(self) -> np.ndarray:
        return ~self.background


@dataclass(frozen=True)
class SampleBatch:
    """Samples of many rays packed into flat arrays, grouped by ray and sorted by t.

    `ray_ids[k]` names the ray owning sample k; `converged[r]` is False when
    ray r ran out of steps while still transmitting more than eps_T.
    """

    origins: np.ndarray
    directions: np.ndarray
    ray_ids: np.ndarray
    t: np.ndarray
    positions: np.ndarray
    s: np.ndarray
    beta: np.ndarray
    slope: np.ndarray
    delta: np.ndarray
    background: np.ndarray
    converged: np.ndarray

    @property
    def ray_count(self) -> int:
        return len(self.origins)

    def __len__(self) -> int:
        return len(self.t)

    def counts(self, background: bool = False) -> np.ndarray:
        """Samples per ray (foreground only unless `background`)."""
        keep = np.ones(len(self), dtype=bool) if background else ~self.background
        return np.bincount(self.ray_ids[keep], minlength=self.ray_count)

    def ray(self, index: int) -> RaySamples:
        rows = self.ray_ids == index
        return RaySamples(
            ray=Ray(self.origins[index], self.directions[index]),
            t=self.t[rows],
            positions=self.positions[rows],
            s=self.s[rows],
            beta=self.beta[rows],
            slope=self.slope[rows],
            delta=self.delta[rows],
            background=self.background[rows],
            converged=bool(self.converged[index]),
        )

    def merged(self, other: "SampleBatch") -> "SampleBatch":
        """Union with samples of the same rays, re-sorted by (ray, t)."""
        if other.ray_count != self.ray_count:
            raise ValueError("Cannot merge sample batches over different rays")
        fields = ("ray_ids", "t", "positions", "s", "beta", "slope", "delta", "background")
        joined = {name: np.concatenate([getattr(self, name), getattr(other, name)]) for name in fields}
        order = np.lexsort((joined["t"], joined["ray_ids"]))
        return SampleBatch(
            origins=self.origins,
            directions=self.directions,
            converged=self.converged & other.converged,
            **{name: value[order] for name, value in joined.items()},
        )

    @classmethod
    def pack(
        cls,
        origins: np.ndarray,
        directions: np.ndarray,
        columns: Sequence[Tuple[np.ndarray, ...]],
        converged: np.ndarray,
        background: bool = False,
    ) -> "SampleBatch":
        """Build a batch from per-step tuples (ray_ids, t, delta, slope, s, beta)."""
        if columns:
            ray_ids, t, delta, slope, s, beta = (np.concatenate(c) for c in zip(*columns))
        else:
            ray_ids = np.zeros(0, dtype=np.int64)
            t = delta = slope = s = beta = np.zeros(0)
        order = np.lexsort((t, ray_ids))
        ray_ids, t = ray_ids[order], t[order]
        return cls(
            origins=origins,
            directions=directions,
            ray_ids=ray_ids,
            t=t,
            positions=origins[ray_ids] + t[:, None] * directions[ray_ids],
            s=s[order],
            beta=beta[order],
            slope=slope[order],
            delta=delta[order],
            background=np.full(len(t), background),
            converged=converged,
        )


class RaySampler(ABC):
    """Strategy interface for placing camera-ray samples inside the foreground grid."""

    name = "base"

    def __init__(self, config: SamplerConfig):
        self.config = config

    @abstractmethod
    def sample(self, geometry: GeometryFn, grid: OccupancyGrid, origins: np.ndarray, directions: np.ndarray) -> SampleBatch:
        """
        Sample a batch of rays.

        Args:
            geometry: field evaluator returning (s, beta) for world points
            grid: occupancy grid bounding the foreground
            origins: [R, 3] ray origins
            directions: [R, 3] unit directions

        Returns:
            SampleBatch with foreground samples only
        """

    def sample_ray(self, geometry: GeometryFn, grid: OccupancyGrid, ray: Ray) -> RaySamples:
        return self.sample(geometry, grid, ray.origin[None], ray.direction[None]).ray(0)

    def _resolved(self, grid: OccupancyGrid) -> SamplerConfig:
        return self.config.resolve(grid.voxel_size)

    @staticmethod
    def _report(converged: np.ndarray, name: str) -> None:
        if len(converged) == 0:
            return
        share = 1.0 - converged.mean()
        if share > NON_CONVERGED_WARN_FRACTION:
            logging.warning(f"{name} sampler: {share:.1%} of {len(converged)} rays hit max_steps before termination")


# ---- background ----

def contract(x: np.ndarray, boundary: float) -> np.ndarray:
    """Radial warp of points given in units of the map radius into a shell of width `boundary`."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        outer = (1.0 + boundary * (1.0 - 1.0 / norm)) * x / norm
    return np.where(norm <= 1.0, x, outer)


def _far_bound(center: np.ndarray, radius: float, origins: np.ndarray, directions: np.ndarray, t_start: np.ndarray) -> np.ndarray:
    """Distance at which each ray leaves the sphere of `radius` around `center`."""
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, directions)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    t_far = -b + np.sqrt(np.maximum(disc, 0.0))
    fallback = t_start + radius
    return np.where((disc > 0) & (t_far > t_start), t_far, fallback)


def background_samples(
    geometry: GeometryFn,
    grid: OccupancyGrid,
    origins: np.ndarray,
    directions: np.ndarray,
    config: SamplerConfig,
) -> SampleBatch:
    """
    n_b samples per ray between the grid exit and the far bound, contracted into the boundary shell.

    t is the bin midpoint along the unwarped ray; delta is the length of the
    contracted bin, so background densities integrate over the shell. Slopes
    are -1 (fully facing).
    """
    config = config.resolve(grid.voxel_size)
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    count = len(origins)
    converged = np.ones(count, dtype=bool)
    n_b = config.n_background
    if n_b == 0 or count == 0:
        return SampleBatch.pack(origins, directions, [], converged, background=True)

    center, radius = grid.center, grid.radius
    t_exit = grid_exit(grid, origins, directions)
    t_start = np.where(np.isfinite(t_exit), t_exit, 0.0)
    t_far = _far_bound(center, config.far_factor * radius, origins, directions, t_start)

    fractions = np.linspace(0.0, 1.0, n_b + 1)
    edges = t_start[:, None] + fractions[None, :] * (t_far - t_start)[:, None]  # [R, n_b+1]
    mids = 0.5 * (edges[:, 1:] + edges[:, :-1])

    def warp(ts: np.ndarray) -> np.ndarray:
        world = origins[:, None, :] + ts[..., None] * directions[:, None, :]
        relative = (world - center) / radius
        return contract(relative, config.boundary / radius) * radius + center

    warped_edges = warp(edges)
    delta = np.linalg.norm(np.diff(warped_edges, axis=1), axis=-1)
    positions = warp(mids)

    s, beta = geometry(positions.reshape(-1, 3))
    ray_ids = np.repeat(np.arange(count), n_b)
    return SampleBatch(
        origins=origins,
        directions=directions,
        ray_ids=ray_ids,
        t=mids.ravel(),
        positions=positions.reshape(-1, 3),
        s=np.asarray(s, dtype=np.float64),
        beta=np.asarray(beta, dtype=np.float64),
        slope=np.full(len(ray_ids), -1.0),
        delta=delta.ravel(),
        background=np.ones(len(ray_ids), dtype=bool),
        converged=converged,
    )


# ---- LiDAR supervision ----

@dataclass(frozen=True)
class SupervisionSamples:
    """Points along scan rays with their along-ray signed distance targets."""

    positions: np.ndarray
    targets: np.ndarray
    t: np.ndarray
    ray_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


def lidar_supervision_samples(
    origins: np.ndarray,
    endpoints: np.ndarray,
    truncation: float,
    rng: np.random.Generator,
    n_uniform: int = 8,
    n_near: int = 4,
) -> SupervisionSamples:
    """
    Uniform free-space samples on [0, t] plus near-surface samples in [t - trunc, t + trunc].

    Args:
        origins: [N, 3] (or [3]) sensor origins
        endpoints: [N, 3] (or [3]) measured points
        truncation: half-width of the near-surface band in meters
        rng: source of the sample offsets

    Returns:
        SupervisionSamples whose target for a sample at distance t_k is t - t_k
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    endpoints = np.atleast_2d(np.asarray(endpoints, dtype=np.float64))
    offsets = endpoints - origins
    ranges = np.linalg.norm(offsets, axis=-1)
    if np.any(ranges <= 0):
        raise ValueError("LiDAR endpoint coincides with its origin")
    if truncation < 0:
        raise ValueError(f"truncation must be non-negative, got {truncation}")
    directions = offsets / ranges[:, None]

    count = len(ranges)
    free = rng.random((count, n_uniform)) * ranges[:, None]
    near = ranges[:, None] + (2.0 * rng.random((count, n_near)) - 1.0) * truncation
    t = np.concatenate([free, near], axis=1)
    ray_ids = np.repeat(np.arange(count), n_uniform + n_near)
    t = t.ravel()
    positions = origins[ray_ids] + t[:, None] * directions[ray_ids]
    return SupervisionSamples(positions=positions, targets=ranges[ray_ids] - t, t=t, ray_ids=ray_ids)
