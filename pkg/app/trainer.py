"""
End-to-end training of the joint field.

Each iteration:
  1. LiDAR rays are drawn from the retained scan points under a fixed point
     budget and supervised with the BCE SDF loss.
  2. Camera pixels are drawn uniformly over all images, sampled with the
     structure-aware sampler (plus background) and supervised photometrically
     once the appearance warm-up has passed.
  3. Eikonal and curvature terms use numerical derivatives at a subset of the
     iteration's samples plus uniform points inside encoded cells.
  4. One Adam step; outlier removal every `outlier_interval` iterations.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from app.autodiff import NonFiniteGradientError, Tensor
from app.dataset_io import atomic_write
from app.density import density_tensor
from app.encoding import SH_DEGREE, DegreeWindow
from app.field import (
    FieldConfig,
    FieldDomain,
    FieldParameters,
    color_tensor,
    eval_sdf_only,
    init_field,
    numerical_derivative_tensors,
    sdf_tensors,
)
from app.losses import (
    LAMBDA_CURV,
    LAMBDA_EIK,
    RGB_WEIGHT_END,
    RGB_WEIGHT_START,
    LossComponents,
    curvature_loss,
    eikonal_loss,
    rgb_loss,
    rgb_weight,
    sdf_loss,
    total_loss,
)
from app.occupancy import OccupancyGrid, encoded_indices
from app.optimizer import Adam, AdamConfig, AdamState
from app.renderer import RenderConfig, Renderer, composite
from app.sampling_strategy import SampleBatch, SamplerConfig, lidar_supervision_samples
from app.scene import Dataset, pixel_rays


class TrainingDivergedError(RuntimeError):
    """A loss component or gradient became NaN/Inf."""

    def __init__(self, component: str, iteration: int):
        super().__init__(f"Training diverged at iteration {iteration}: non-finite {component}")
        self.component = component
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    ndf_rays: int = 8192
    point_budget: int = 16384  # 256000 at full scale
    camera_rays: int = 512
    lambda_eik: float = LAMBDA_EIK
    lambda_curv: float = LAMBDA_CURV
    rgb_weight_start: float = RGB_WEIGHT_START
    rgb_weight_end: float = RGB_WEIGHT_END
    outlier_interval: int = 2000
    outlier_eps: Optional[float] = None  # 0.3 * voxel_size when unset
    appearance_warmup: int = 200
    uniform_lidar_samples: int = 8
    near_surface_samples: int = 4
    truncation: Optional[float] = None  # 2 * voxel_size when unset
    eikonal_points: int = 1024
    derivative_samples: int = 4096
    eps_start_factor: float = 2.0
    eps_end_factor: float = 0.5
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0
    fixed_beta: Optional[float] = None
    rgb_enabled: bool = True
    detach_target_beta: bool = False
    log_interval: int = 100

    def __post_init__(self) -> None:
        for name in ("iterations", "ndf_rays", "point_budget", "outlier_interval", "log_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("camera_rays", "appearance_warmup", "eikonal_points", "derivative_samples", "near_surface_samples"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("lambda_eik", "lambda_curv", "rgb_weight_start", "rgb_weight_end"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.uniform_lidar_samples < 1:
            raise ValueError(f"uniform_lidar_samples must be >= 1, got {self.uniform_lidar_samples}")
        if self.point_budget < self.samples_per_lidar_ray:
            raise ValueError(f"point_budget {self.point_budget} is below one ray ({self.samples_per_lidar_ray} samples)")
        if not 0 < self.eps_end_factor <= self.eps_start_factor:
            raise ValueError("Need 0 < eps_end_factor <= eps_start_factor")
        if self.fixed_beta is not None and self.fixed_beta <= 0:
            raise ValueError(f"fixed_beta must be positive, got {self.fixed_beta}")

    @property
    def samples_per_lidar_ray(self) -> int:
        return self.uniform_lidar_samples + self.near_surface_samples

    @property
    def lidar_rays(self) -> int:
        """Rays per iteration: as many as the point budget allows, up to ndf_rays."""
        return min(self.ndf_rays, self.point_budget // self.samples_per_lidar_ray)


@dataclass
class TrainLog:
    """One record per iteration; `retained` marks scan points that survived outlier removal."""

    records: List[Dict[str, float]] = field(default_factory=list)
    retained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    optimizer_state: Optional[AdamState] = None

    def append(self, **values: float) -> None:
        self.records.append(values)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.records)

    def to_csv(self, path: Union[str, Path]) -> None:
        with atomic_write(path, "w") as handle:
            self.to_frame().to_csv(handle, index=False)


# ---- schedules ----

def degree_schedule(iteration: int, iterations: int) -> DegreeWindow:
    """Directional band window opening linearly from degree 0 to 4 over the run."""
    if iterations <= 1:
        return DegreeWindow(float(SH_DEGREE))
    fraction = min(max(iteration, 0), iterations - 1) / (iterations - 1)
    return DegreeWindow(SH_DEGREE * fraction)


def finest_cell_size(params: FieldParameters) -> float:
    return 2.0 * params.domain.half_size / params.config.encoding.max_resolution


def derivative_eps(iteration: int, iterations: int, finest_cell: float, start: float = 2.0, end: float = 0.5) -> float:
    """Finite-difference step decaying exponentially from start*cell to end*cell."""
    fraction = 0.0 if iterations <= 1 else min(max(iteration, 0), iterations - 1) / (iterations - 1)
    return finest_cell * start * (end / start) ** fraction


def sphere_blend(iteration: int, blend_iterations: int) -> float:
    if blend_iterations <= 0:
        return 0.0
    return max(0.0, 1.0 - iteration / blend_iterations)


# ---- outliers ----

def remove_outliers(params: FieldParameters, points: np.ndarray, eps: float) -> Tuple[np.ndarray, int]:
    """
    Drop scan points the field places more than `eps` off its zero level set.

    Args:
        params: current field
        points: [N, 3] scan endpoints
        eps: tolerance in meters (inf keeps everything)

    Returns:
        (boolean keep-mask over `points`, number removed)
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) == 0 or math.isinf(eps):
        return np.ones(len(points), dtype=bool), 0
    keep = np.abs(eval_sdf_only(params, points)) <= eps
    return keep, int(np.count_nonzero(~keep))


# ---- batch assembly ----

@dataclass(frozen=True)
class ScanPool:
    """All scan returns flattened in dataset order."""

    origins: np.ndarray
    endpoints: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "ScanPool":
        origins = [np.broadcast_to(scan.origin, scan.points.shape) for scan in dataset.scans if len(scan)]
        endpoints = [scan.points for scan in dataset.scans if len(scan)]
        if not endpoints:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(np.concatenate(origins), np.concatenate(endpoints))

    def __len__(self) -> int:
        return len(self.endpoints)


@dataclass(frozen=True)
class PixelPool:
    """Flattened pixel rays and colours of all training images."""

    origins: np.ndarray
    directions: np.ndarray
    colors: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "PixelPool":
        origins, directions, colors = [], [], []
        for image in dataset.images:
            vs, us = np.mgrid[0:image.intrinsics.height, 0:image.intrinsics.width]
            o, d = pixel_rays(image, None, us.ravel(), vs.ravel())
            origins.append(o)
            directions.append(d)
            colors.append(image.pixels.reshape(-1, 3))
        if not origins:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(np.concatenate(origins), np.concatenate(directions), np.concatenate(colors))

    def __len__(self) -> int:
        return len(self.colors)


def _uniform_encoded_points(grid: OccupancyGrid, count: int, rng: np.random.Generator) -> np.ndarray:
    cells = encoded_indices(grid)
    if count == 0 or len(cells) == 0:
        return np.zeros((0, 3))
    picked = cells[rng.integers(0, len(cells), size=count)]
    return grid.origin + (picked + rng.random((count, 3))) * grid.voxel_size


def _sample_camera_rays(renderer: Renderer, origins: np.ndarray, directions: np.ndarray, workers: int) -> SampleBatch:
    """Sample chunks of camera rays concurrently; chunk order is preserved."""
    if workers <= 1 or len(origins) < 2 * workers:
        return renderer.sample(origins, directions)
    parts = np.array_split(np.arange(len(origins)), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        batches = list(pool.map(lambda rows: renderer.sample(origins[rows], directions[rows]), parts))
    columns = ("t", "positions", "s", "beta", "slope", "delta", "background")
    offsets = np.cumsum([0] + [len(rows) for rows in parts[:-1]])
    return SampleBatch(
        origins=origins,
        directions=directions,
        ray_ids=np.concatenate([b.ray_ids + off for b, off in zip(batches, offsets)]),
        converged=np.concatenate([b.converged for b in batches]),
        **{name: np.concatenate([getattr(b, name) for b in batches]) for name in columns},
    )


def _check_finite(name: str, value: Optional[Tensor], iteration: int) -> None:
    if value is not None and not np.all(np.isfinite(value.data)):
        raise TrainingDivergedError(name, iteration)


# ---- loop ----

def train(
    dataset: Dataset,
    grid: OccupancyGrid,
    config: TrainConfig = TrainConfig(),
    field_config: FieldConfig = FieldConfig(),
    sampler_config: SamplerConfig = SamplerConfig(),
    render_config: RenderConfig = RenderConfig(),
    workers: int = 1,
    resume: Optional[Tuple[FieldParameters, AdamState]] = None,
) -> Tuple[FieldParameters, TrainLog]:
    """
    Fit the field to a dataset inside an occupancy grid.

    Args:
        dataset: posed images and scans
        grid: built and visibility-classified occupancy grid
        config: iteration counts, batch sizes, loss weights and schedules
        field_config: network layout
        sampler_config: camera-ray sampler settings
        render_config: background colour used for photometric supervision
        workers: threads for camera-ray sampling; 1 gives bit-identical logs per seed
        resume: parameters and optimizer state of an interrupted run

    Returns:
        (trained parameters, per-iteration log)

    Raises:
        TrainingDivergedError: a loss component or gradient became non-finite
    """
    scans = ScanPool.from_dataset(dataset)
    pixels = PixelPool.from_dataset(dataset)
    if len(scans) == 0 and len(pixels) == 0:
        raise ValueError("Cannot train on a dataset without scans or images")

    rng = np.random.default_rng(config.seed)
    if config.fixed_beta is not None:
        field_config = replace(field_config, fixed_beta=config.fixed_beta)
    if resume is not None:
        params, adam_state = resume
        params.config = replace(params.config, fixed_beta=field_config.fixed_beta)
    else:
        params, adam_state = init_field(field_config, FieldDomain.from_grid(grid), config.seed), AdamState()
    optimizer = Adam(config.adam, adam_state)
    renderer = Renderer(params, grid, sampler_config, render_config, workers=workers)

    voxel = grid.voxel_size
    truncation = 2.0 * voxel if config.truncation is None else config.truncation
    outlier_eps = 0.3 * voxel if config.outlier_eps is None else config.outlier_eps
    finest_cell = finest_cell_size(params)
    retained = np.ones(len(scans), dtype=bool)
    log = TrainLog()
    start = adam_state.step
    iterations = config.iterations
    logging.info(
        "Training %d iterations: %d scan points, %d pixels, %d LiDAR rays/iter, %s",
        iterations - start, len(scans), len(pixels), config.lidar_rays, renderer.get_strategy_info()["strategy"],
    )

    for it in range(start, iterations):
        tic = time.perf_counter()
        params.sphere_blend = sphere_blend(it, params.config.sphere_init_iterations)
        params.zero_grad()
        window = degree_schedule(it, iterations)
        eps = derivative_eps(it, iterations, finest_cell, config.eps_start_factor, config.eps_end_factor)
        derivative_points = []

        # LiDAR supervision
        alive = np.flatnonzero(retained)
        components: Dict[str, Optional[Tensor]] = {"sdf": None, "rgb": None}
        beta_values = np.zeros(0)
        if len(alive):
            rays = alive[rng.integers(0, len(alive), size=min(config.lidar_rays, len(alive)))]
            batch = lidar_supervision_samples(
                scans.origins[rays], scans.endpoints[rays], truncation, rng,
                config.uniform_lidar_samples, config.near_surface_samples,
            )
            s_pred, beta_pred = sdf_tensors(params, batch.positions)
            components["sdf"] = sdf_loss(s_pred, beta_pred, batch.targets, config.detach_target_beta)
            beta_values = beta_pred.data
            derivative_points.append(batch.positions)

        # photometric supervision
        photometric = bool(config.rgb_enabled and config.camera_rays > 0 and len(pixels)) and it >= config.appearance_warmup
        lambda_rgb = rgb_weight(it, iterations, config.rgb_weight_start, config.rgb_weight_end)
        samples_per_ray = float("nan")
        if photometric:
            picked = rng.integers(0, len(pixels), size=config.camera_rays)
            camera = _sample_camera_rays(renderer, pixels.origins[picked], pixels.directions[picked], workers)
            samples_per_ray = float(camera.counts().mean())
            if len(camera):
                s_cam, beta_cam = sdf_tensors(params, camera.positions)
                sigma = density_tensor(s_cam, beta_cam, camera.slope)
                colors = color_tensor(params, camera.positions, camera.directions[camera.ray_ids], window)
                rendered = composite(sigma, camera.delta, camera.ray_ids, camera.ray_count, colors, render_config.background_color)
                components["rgb"] = rgb_loss(rendered.color, pixels.colors[picked])
                derivative_points.append(camera.positions[~camera.background])

        # regularisers
        pool = np.concatenate(derivative_points) if derivative_points else np.zeros((0, 3))
        if len(pool) > config.derivative_samples:
            pool = pool[rng.choice(len(pool), size=config.derivative_samples, replace=False)]
        pool = np.concatenate([pool, _uniform_encoded_points(grid, config.eikonal_points, rng)])
        eikonal = curvature = None
        if len(pool) and (config.lambda_eik > 0 or config.lambda_curv > 0):
            gradient, laplacian = numerical_derivative_tensors(params, pool, eps)
            eikonal = eikonal_loss(gradient)
            curvature = curvature_loss(laplacian)

        sdf_term = components["sdf"] if components["sdf"] is not None else Tensor(np.zeros((), dtype=np.float32))
        parts = LossComponents(sdf=sdf_term, rgb=components["rgb"], eikonal=eikonal, curvature=curvature)
        for name in ("sdf", "rgb", "eikonal", "curvature"):
            _check_finite(name, getattr(parts, name), it)
        loss = total_loss(it, iterations, parts, config.lambda_eik, config.lambda_curv, lambda_rgb)
        _check_finite("total", loss, it)

        if loss.requires_grad:
            try:
                loss.backward()
            except NonFiniteGradientError as e:
                raise TrainingDivergedError(f"gradient ({e.op})", it) from e
        names = params.geometry_names() + (params.appearance_names() if photometric else [])
        optimizer.step(params.named_parameters(), names)

        removed = 0
        if (it + 1) % config.outlier_interval == 0 and len(alive):
            keep, removed = remove_outliers(params, scans.endpoints[alive], outlier_eps)
            retained[alive[~keep]] = False
            if removed:
                logging.warning("Iteration %d: removed %d outlier scan points (%d remain)", it + 1, removed, int(retained.sum()))

        values = parts.values()
        log.append(
            iteration=it,
            total=loss.item(),
            sdf=values["sdf"],
            rgb=values["rgb"],
            eikonal=values["eikonal"],
            curvature=values["curvature"],
            lambda_rgb=lambda_rgb if photometric else 0.0,
            degree=window.active_degree,
            eps=eps,
            beta_mean=float(beta_values.mean()) if beta_values.size else float("nan"),
            beta_min=float(beta_values.min()) if beta_values.size else float("nan"),
            beta_max=float(beta_values.max()) if beta_values.size else float("nan"),
            removed=removed,
            samples_per_ray=samples_per_ray,
            wall_time=time.perf_counter() - tic,
        )
        if (it + 1) % config.log_interval == 0 or it == iterations - 1:
            logging.info(
                "it %d/%d loss %.5f (sdf %.5f rgb %.5f eik %.5f curv %.5f) beta %.4g",
                it + 1, iterations, loss.item(), values["sdf"], values["rgb"], values["eikonal"], values["curvature"],
                log.records[-1]["beta_mean"],
            )

    params.sphere_blend = sphere_blend(iterations, params.config.sphere_init_iterations)
    log.retained = retained
    log.optimizer_state = optimizer.state
    return params, log
