"""
Volume rendering of the field along sampled rays.

Per ray with samples k = 0..K-1 (foreground, then background):

    alpha_k = 1 - exp(-sigma_k * delta_k)
    T_k     = exp(-sum_{j<k} sigma_j * delta_j)
    C       = sum_k T_k alpha_k c_k + T_final * background_color

Depth and scale are the weight-averaged t and beta, normalised by opacity.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import imageio.v2 as imageio
import numpy as np

from app.autodiff import Tensor, as_tensor, cast, no_grad, segment_sum
from app.dataset_io import atomic_path, atomic_write, write_image
from app.density import sdf_to_density
from app.encoding import DegreeWindow
from app.field import FieldParameters, eval_color, eval_sdf
from app.occupancy import OccupancyGrid, encoded_mask
from app.sampling_strategy import RaySampler, RaySamples, SampleBatch, SamplerConfig, background_samples
from app.scene import BACKGROUND_COLOR, CameraIntrinsics, Pose, pixel_rays
from app.structure_aware_sampling_strategy import StructureAwareSampler
from app.uniform_sampling_strategy import UniformSampler


RENDER_MODES = ("color", "depth", "scale", "samples")

# exp(-700) underflows to 0 in float64; larger optical depths change nothing.
_MAX_OPTICAL_DEPTH = 700.0
_MIN_OPACITY = 1e-6


@dataclass(frozen=True)
class RenderConfig:
    background_color: Tuple[float, float, float] = BACKGROUND_COLOR
    chunk_size: int = 4096
    depth_units_per_meter: float = 1000.0

    def __post_init__(self) -> None:
        if len(self.background_color) != 3:
            raise ValueError(f"background_color needs 3 components, got {self.background_color}")
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.depth_units_per_meter <= 0:
            raise ValueError(f"depth_units_per_meter must be positive, got {self.depth_units_per_meter}")


@dataclass(frozen=True)
class RenderResult:
    """Per-ray render outputs; fields are scalars (color a 3-vector) for a single ray."""

    color: np.ndarray
    depth: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    transmittance: np.ndarray
    sample_count: np.ndarray
    converged: np.ndarray


@dataclass(frozen=True)
class Composite:
    """Graph-carrying compositing result for a batch of rays."""

    color: Tensor  # [R, 3]
    weights: Tensor  # [K]
    opacity: Tensor  # [R]
    transmittance: Tensor  # [R]


def composite(
    sigma: Tensor,
    delta: np.ndarray,
    ray_ids: np.ndarray,
    ray_count: int,
    colors: Tensor,
    background_color=BACKGROUND_COLOR,
) -> Composite:
    """
    Alpha-composite packed samples (grouped by ray, sorted by t within a ray).

    Accumulation runs in float64. Gradients reach `sigma` and `colors`.
    """
    ray_ids = np.asarray(ray_ids, dtype=np.int64)
    optical = (cast(as_tensor(sigma), np.float64) * np.asarray(delta, dtype=np.float64)).clip(0.0, _MAX_OPTICAL_DEPTH)
    if len(ray_ids):
        running = optical.cumsum(axis=0)
        exclusive = running - optical
        first = np.searchsorted(ray_ids, ray_ids, side="left")
        before = exclusive - exclusive[first]
        weights = (-before).exp() * (1.0 - (-optical).exp())
    else:
        weights = optical
    colors = cast(as_tensor(colors), np.float64)
    color = segment_sum(weights.reshape(-1, 1) * colors, ray_ids, ray_count)
    opacity = segment_sum(weights, ray_ids, ray_count)
    transmittance = (-segment_sum(optical, ray_ids, ray_count)).exp()
    background = np.asarray(background_color, dtype=np.float64)[None, :]
    color = color + transmittance.reshape(-1, 1) * background
    return Composite(color=color, weights=weights, opacity=opacity, transmittance=transmittance)


def _weighted_means(weights: np.ndarray, ray_ids: np.ndarray, ray_count: int, opacity: np.ndarray, *values: np.ndarray):
    denominator = np.maximum(opacity, _MIN_OPACITY)
    return tuple(np.bincount(ray_ids, weights=weights * v, minlength=ray_count) / denominator for v in values)


def volume_render(
    samples: RaySamples,
    colors: np.ndarray,
    background_color=BACKGROUND_COLOR,
    sigma: Optional[np.ndarray] = None,
) -> RenderResult:
    """
    Render a single ray.

    Args:
        samples: ordered samples of the ray
        colors: [K, 3] per-sample colour
        background_color: colour seen through the residual transmittance
        sigma: densities; derived from (s, beta, slope) when omitted

    Returns:
        RenderResult with scalar depth/scale/opacity/transmittance
    """
    if sigma is None:
        sigma = sdf_to_density(samples.s, samples.beta, samples.slope)
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    ids = np.zeros(len(samples), dtype=np.int64)
    with no_grad():
        result = composite(Tensor(sigma), samples.delta, ids, 1, Tensor(np.asarray(colors, dtype=np.float64).reshape(-1, 3)), background_color)
    opacity = result.opacity.data
    depth, scale = _weighted_means(result.weights.data, ids, 1, opacity, samples.t, samples.beta)
    return RenderResult(
        color=result.color.data[0],
        depth=float(depth[0]),
        scale=float(scale[0]),
        opacity=float(opacity[0]),
        transmittance=float(result.transmittance.data[0]),
        sample_count=int(samples.foreground.sum()),
        converged=samples.converged,
    )


class Renderer:
    """
    Renders a trained field through an occupancy grid.

    Both sampling strategies are created up front; the active one is chosen
    by name. Foreground samples come from the strategy, background samples
    from scene contraction beyond the grid.
    """

    def __init__(
        self,
        params: FieldParameters,
        grid: OccupancyGrid,
        sampler_config: SamplerConfig = SamplerConfig(),
        config: RenderConfig = RenderConfig(),
        strategy: str = StructureAwareSampler.name,
        workers: int = 1,
    ):
        """
        Args:
            params: field to render
            grid: occupancy grid (restricts foreground sampling)
            sampler_config: sampler settings; voxel defaults resolved against `grid`
            config: background colour and batching
            strategy: "structure_aware" or "uniform"
            workers: threads used for independent ray chunks
        """
        self.params = params
        self.grid = grid
        self.sampler_config = sampler_config.resolve(grid.voxel_size)
        self.config = config
        self.workers = max(1, int(workers))

        # Pre-create strategy instances
        self.strategies: Dict[str, RaySampler] = {
            StructureAwareSampler.name: StructureAwareSampler(self.sampler_config),
            UniformSampler.name: UniformSampler(self.sampler_config),
        }
        self.strategy = self._select_strategy(strategy)

    def _select_strategy(self, name: str) -> RaySampler:
        try:
            return self.strategies[name]
        except KeyError:
            raise ValueError(f"Unknown sampling strategy '{name}' (choose from {sorted(self.strategies)})") from None

    def get_strategy_info(self) -> dict:
        """
        Describe the active sampling strategy and the settings that drive it.

        Returns:
            Dictionary with strategy information
        """
        cfg = self.sampler_config
        encoded = int(encoded_mask(self.grid).sum())
        reasons = [f"{encoded} of {self.grid.cells.size} cells encoded"]
        if self.strategy.name == StructureAwareSampler.name:
            reasons.append(f"adaptive steps (gamma={cfg.gamma}, eps_T={cfg.eps_T}, delta_min={cfg.delta_min:.4g})")
            if encoded < self.grid.cells.size:
                reasons.append("free and unseen cells skipped")
        else:
            reasons.append(f"{cfg.uniform_samples} evenly spaced samples per ray")
        if cfg.n_background:
            reasons.append(f"{cfg.n_background} contracted background samples (boundary {cfg.boundary:.4g} m)")
        return {
            "strategy": type(self.strategy).__name__,
            "encoded_cells": encoded,
            "reasons": reasons,
        }

    def geometry(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return eval_sdf(self.params, x)

    def sample(self, origins: np.ndarray, directions: np.ndarray) -> SampleBatch:
        """Foreground samples from the active strategy merged with background samples."""
        foreground = self.strategy.sample(self.geometry, self.grid, origins, directions)
        if self.sampler_config.n_background == 0:
            return foreground
        return foreground.merged(background_samples(self.geometry, self.grid, origins, directions, self.sampler_config))

    def _render_chunk(self, origins: np.ndarray, directions: np.ndarray, window: DegreeWindow) -> RenderResult:
        batch = self.sample(origins, directions)
        count = batch.ray_count
        sigma = sdf_to_density(batch.s, batch.beta, batch.slope)
        colors = eval_color(self.params, batch.positions, batch.directions[batch.ray_ids], window) if len(batch) else np.zeros((0, 3))
        with no_grad():
            result = composite(Tensor(np.asarray(sigma)), batch.delta, batch.ray_ids, count, Tensor(colors), self.config.background_color)
        opacity = result.opacity.data
        depth, scale = _weighted_means(result.weights.data, batch.ray_ids, count, opacity, batch.t, batch.beta)
        return RenderResult(
            color=result.color.data,
            depth=depth,
            scale=scale,
            opacity=opacity,
            transmittance=result.transmittance.data,
            sample_count=batch.counts(),
            converged=batch.converged,
        )

    def render_rays(self, origins: np.ndarray, directions: np.ndarray, window: DegreeWindow = DegreeWindow()) -> RenderResult:
        """Render many rays in chunks; chunks run on `workers` threads and are merged in order."""
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        step = self.config.chunk_size
        parts = [slice(a, min(a + step, len(origins))) for a in range(0, len(origins), step)]
        job = lambda part: self._render_chunk(origins[part], directions[part], window)  # noqa: E731
        if self.workers > 1 and len(parts) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                chunks = list(pool.map(job, parts))
        else:
            chunks = [job(part) for part in parts]
        if not chunks:
            empty = np.zeros(0)
            return RenderResult(np.zeros((0, 3)), empty, empty, empty, empty, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool))
        return RenderResult(*(np.concatenate([getattr(c, name) for c in chunks]) for name in RenderResult.__dataclass_fields__))

    def render_image(
        self,
        camera: CameraIntrinsics,
        pose: Pose,
        window: DegreeWindow = DegreeWindow(),
        mode: str = "color",
    ) -> np.ndarray:
        """
        Render a full frame.

        Returns:
            [H, W, 3] colour for mode "color"; [H, W] depth (m), scale (m) or
            per-ray foreground sample counts otherwise.
        """
        if mode not in RENDER_MODES:
            raise ValueError(f"Unknown render mode '{mode}' (choose from {RENDER_MODES})")
        vs, us = np.mgrid[0:camera.height, 0:camera.width]
        origins, directions = pixel_rays(camera, pose, us.ravel(), vs.ravel())
        result = self.render_rays(origins, directions, window)
        logging.info(
            f"Rendered {camera.width}x{camera.height} {mode} image, "
            f"{result.sample_count.mean():.1f} samples/ray, {np.count_nonzero(~result.converged)} rays non-converged"
        )
        shape = (camera.height, camera.width)
        if mode == "color":
            return np.clip(result.color, 0.0, 1.0).reshape(shape + (3,))
        if mode == "depth":
            return result.depth.reshape(shape)
        if mode == "scale":
            return result.scale.reshape(shape)
        return result.sample_count.reshape(shape).astype(np.float64)


# ---- output files ----

def heatmap(values: np.ndarray) -> np.ndarray:
    """Map a 2-D array to a blue-to-red [H, W, 3] image over its own min/max."""
    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    low, high = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    u = np.clip((np.nan_to_num(values, nan=low) - low) / max(high - low, 1e-12), 0.0, 1.0)
    return np.stack([u, 1.0 - np.abs(2.0 * u - 1.0), 1.0 - u], axis=-1)


def save_render(path: Union[str, Path], image: np.ndarray, mode: str, config: RenderConfig = RenderConfig()) -> Path:
    """
    Write a render_image result.

    Colour is written as 8-bit PNG. Depth is written as 16-bit PNG in
    `depth_units_per_meter` units with a JSON sidecar (`<name>.json`)
    documenting the scale. Scale and sample-count renders become heatmaps
    with their value range in the sidecar.
    """
    path = Path(path)
    if mode == "color":
        write_image(path, image)
        return path
    sidecar = {"mode": mode}
    if mode == "depth":
        units = config.depth_units_per_meter
        data = np.clip(np.round(np.nan_to_num(image) * units), 0, np.iinfo(np.uint16).max).astype(np.uint16)
        with atomic_path(path) as tmp:
            imageio.imwrite(tmp, data)
        sidecar.update({"dtype": "uint16", "units_per_meter": units, "max_depth_m": np.iinfo(np.uint16).max / units})
    elif mode in ("scale", "samples"):
        write_image(path, heatmap(image))
        sidecar.update({"min": float(np.nanmin(image)), "max": float(np.nanmax(image)), "colormap": "blue-to-red"})
    else:
        raise ValueError(f"Unknown render mode '{mode}' (choose from {RENDER_MODES})")
    with atomic_write(path.with_suffix(".json"), "w") as handle:
        json.dump(sidecar, handle, indent=2)
    return path


def read_depth(path: Union[str, Path]) -> np.ndarray:
    """Depth in meters from a PNG written by save_render."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return np.asarray(imageio.imread(path), dtype=np.float64) / float(meta["units_per_meter"])
