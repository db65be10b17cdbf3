"""
Loss terms, schedules, outlier removal and the training loop.
"""

import functools
import tempfile
import unittest
import sys
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from app.autodiff import Tensor, parameter
from app.config import PipelineConfig
from app.field import FieldDomain, eval_sdf, init_field
from app.losses import (
    LossComponents,
    curvature_loss,
    eikonal_loss,
    rgb_loss,
    rgb_weight,
    sdf_loss,
    total_loss,
)
from app.occupancy import build_grid, classify_visible
from app.optimizer import AdamState
from app.renderer import Renderer
from app.sampling_strategy import SamplerConfig
from app.scene import Bounds, Dataset, orbit_trajectory, pixel_rays
from app.synthetic import generate_synthetic
from app.trainer import (
    PixelPool,
    ScanPool,
    TrainConfig,
    TrainingDivergedError,
    degree_schedule,
    derivative_eps,
    remove_outliers,
    sphere_blend,
    train,
)
from tests.test_helpers import (
    desk_dataset,
    fibonacci_directions,
    small_camera,
    sphere_prior_params,
    sphere_scene,
    tiny_field_config,
)

pytestmark = pytest.mark.training


class TestLosses(unittest.TestCase):

    def test_bce_of_surface_sample_is_log_two(self):
        loss = sdf_loss(Tensor(np.array([0.0])), Tensor(np.array([0.1])), np.array([0.0]))
        self.assertAlmostEqual(loss.item(), np.log(2.0), places=9)

    def test_bce_is_smallest_at_the_target(self):
        beta = Tensor(np.array([0.05]))
        at = sdf_loss(Tensor(np.array([0.02])), beta, np.array([0.02])).item()
        off = sdf_loss(Tensor(np.array([0.12])), beta, np.array([0.02])).item()
        self.assertLess(at, off)

    def test_bce_clamp_keeps_loss_finite(self):
        loss = sdf_loss(Tensor(np.array([5.0])), Tensor(np.array([1e-3])), np.array([-5.0]))
        self.assertTrue(np.isfinite(loss.item()))
        self.assertAlmostEqual(loss.item(), -np.log(1e-6), delta=1e-3)

    def test_detached_target_scale_changes_beta_gradient(self):
        s = np.array([0.03, -0.02])
        targets = np.array([0.01, 0.02])
        grads = []
        for detach in (False, True):
            beta = parameter(np.array([0.05, 0.05]))
            sdf_loss(Tensor(s), beta, targets, detach_target_beta=detach).backward()
            grads.append(beta.grad)
        self.assertFalse(np.allclose(grads[0], grads[1]))

    def test_rgb_eikonal_curvature_values(self):
        self.assertAlmostEqual(rgb_loss(Tensor(np.ones((1, 3))), np.zeros((1, 3))).item(), 3.0)
        self.assertAlmostEqual(eikonal_loss(np.array([[2.0], [0.0], [0.0]])).item(), 1.0, places=9)
        self.assertAlmostEqual(eikonal_loss(np.array([[0.6, 0.0], [0.8, 1.0], [0.0, 0.0]])).item(), 0.0, places=9)
        self.assertAlmostEqual(curvature_loss(np.array([-2.0, 2.0])).item(), 2.0)

    def test_total_loss_weights_components(self):
        parts = LossComponents(
            sdf=Tensor(np.array(1.0)),
            rgb=Tensor(np.array(2.0)),
            eikonal=Tensor(np.array(3.0)),
            curvature=Tensor(np.array(4.0)),
        )
        total = total_loss(0, 10, parts, lambda_eik=0.1, lambda_curv=0.01, lambda_rgb=0.5)
        self.assertAlmostEqual(total.item(), 1.0 + 1.0 + 0.3 + 0.04)
        bare = total_loss(0, 10, LossComponents(sdf=Tensor(np.array(1.0))))
        self.assertAlmostEqual(bare.item(), 1.0)
        self.assertTrue(np.isnan(LossComponents(sdf=Tensor(np.array(1.0))).values()["rgb"]))


class TestSchedules(unittest.TestCase):

    def test_rgb_weight_ramp(self):
        self.assertAlmostEqual(rgb_weight(0, 3), 1e-4)
        self.assertAlmostEqual(rgb_weight(1, 3), 5.00005)
        self.assertAlmostEqual(rgb_weight(2, 3), 10.0)
        self.assertAlmostEqual(rgb_weight(0, 1), 10.0)

    def test_degree_window_opens_linearly(self):
        self.assertEqual(degree_schedule(0, 5).active_degree, 0.0)
        self.assertEqual(degree_schedule(1, 5).active_degree, 1.0)
        self.assertEqual(degree_schedule(4, 5).active_degree, 4.0)
        self.assertEqual(degree_schedule(0, 1).active_degree, 4.0)

    def test_derivative_step_decays_geometrically(self):
        self.assertAlmostEqual(derivative_eps(0, 11, 0.01), 0.02)
        self.assertAlmostEqual(derivative_eps(5, 11, 0.01), 0.01)
        self.assertAlmostEqual(derivative_eps(10, 11, 0.01), 0.005)

    def test_sphere_blend_fades_out(self):
        self.assertEqual(sphere_blend(0, 100), 1.0)
        self.assertEqual(sphere_blend(50, 100), 0.5)
        self.assertEqual(sphere_blend(150, 100), 0.0)
        self.assertEqual(sphere_blend(0, 0), 0.0)

    def test_lidar_rays_follow_point_budget(self):
        self.assertEqual(TrainConfig().lidar_rays, 16384 // 12)
        self.assertEqual(TrainConfig(ndf_rays=100, point_budget=256_000).lidar_rays, 100)
        with self.assertRaises(ValueError):
            TrainConfig(point_budget=5)
        with self.assertRaises(ValueError):
            TrainConfig(eps_start_factor=0.5, eps_end_factor=2.0)


class TestOutlierRemoval(unittest.TestCase):

    def test_points_off_the_zero_level_set_are_dropped(self):
        params = sphere_prior_params(radius=0.5)
        points = np.array([[0.5, 0.0, 0.0], [0.0, 0.52, 0.0], [0.0, 0.0, 0.7], [0.1, 0.0, 0.0]])
        keep, removed = remove_outliers(params, points, 0.05)
        np.testing.assert_array_equal(keep, [True, True, False, False])
        self.assertEqual(removed, 2)

    def test_infinite_tolerance_keeps_everything(self):
        params = sphere_prior_params(radius=0.5)
        keep, removed = remove_outliers(params, np.full((3, 3), 9.0), float("inf"))
        self.assertTrue(keep.all())
        self.assertEqual(removed, 0)


def small_config(**overrides) -> TrainConfig:
    values = dict(
        iterations=4,
        ndf_rays=32,
        point_budget=384,
        camera_rays=8,
        appearance_warmup=2,
        eikonal_points=16,
        derivative_samples=64,
        outlier_interval=2,
        log_interval=1,
        seed=3,
    )
    values.update(overrides)
    return TrainConfig(**values)


class TestTrainingLoop(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        _, cls.dataset = desk_dataset(views=2, size=8, rays=200, seed=1)
        grid = build_grid(cls.dataset.scans, cls.dataset.bounds, 0.2)
        cls.grid = classify_visible(grid, cls.dataset.images, ray_stride=2)
        cls.field_config = tiny_field_config(dtype="float32", sphere_init_iterations=2)
        cls.sampler_config = SamplerConfig(n_background=2, max_steps=64)

    def run_training(self, config=None, **kwargs):
        return train(
            self.dataset,
            self.grid,
            config or small_config(),
            self.field_config,
            self.sampler_config,
            **kwargs,
        )

    def test_pools_flatten_dataset(self):
        scans = ScanPool.from_dataset(self.dataset)
        pixels = PixelPool.from_dataset(self.dataset)
        self.assertEqual(len(scans), sum(len(s) for s in self.dataset.scans))
        self.assertEqual(len(pixels), 2 * 8 * 8)

    def test_same_seed_gives_identical_run(self):
        params_a, log_a = self.run_training()
        params_b, log_b = self.run_training()
        pd.testing.assert_series_equal(log_a.to_frame()["total"], log_b.to_frame()["total"])
        for name, tensor in params_a.named_parameters().items():
            np.testing.assert_array_equal(tensor.data, params_b.named_parameters()[name].data)

    def test_log_records_every_iteration(self):
        params, log = self.run_training()
        frame = log.to_frame()
        self.assertEqual(list(frame["iteration"]), [0, 1, 2, 3])
        self.assertTrue(np.all(np.isfinite(frame["total"])))
        self.assertTrue(frame["rgb"].iloc[:2].isna().all())
        self.assertTrue(np.all(np.isfinite(frame["rgb"].iloc[2:])))
        self.assertEqual(list(frame["lambda_rgb"].iloc[:2]), [0.0, 0.0])
        self.assertTrue(np.all(frame["beta_min"] >= self.field_config.beta_min))
        self.assertEqual(len(log.retained), len(ScanPool.from_dataset(self.dataset)))
        self.assertEqual(log.optimizer_state.step, 4)
        self.assertEqual(params.sphere_blend, 0.0)

    def test_log_written_as_csv(self):
        _, log = self.run_training(small_config(iterations=2))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "logs" / "train.csv"
            log.to_csv(path)
            frame = pd.read_csv(path)
        self.assertEqual(len(frame), 2)
        self.assertIn("eikonal", frame.columns)

    def test_geometry_only_run_leaves_appearance_untouched(self):
        params, _ = self.run_training(small_config(rgb_enabled=False))
        fresh = init_field(self.field_config, FieldDomain.from_grid(self.grid), 3)
        for name in params.appearance_names():
            np.testing.assert_array_equal(params.named_parameters()[name].data, fresh.named_parameters()[name].data)
        moved = [
            not np.array_equal(params.named_parameters()[name].data, fresh.named_parameters()[name].data)
            for name in params.geometry_names()
        ]
        self.assertTrue(any(moved))

    def test_fixed_beta_run(self):
        params, log = self.run_training(small_config(iterations=2, fixed_beta=0.01))
        self.assertEqual(params.config.fixed_beta, 0.01)
        np.testing.assert_allclose(log.to_frame()["beta_mean"], 0.01, rtol=1e-6)

    def test_resume_continues_step_count(self):
        params, log = self.run_training(small_config(iterations=2))
        _, resumed = self.run_training(small_config(iterations=4), resume=(params, log.optimizer_state))
        self.assertEqual(list(resumed.to_frame()["iteration"]), [2, 3])
        self.assertEqual(resumed.optimizer_state.step, 4)

    def test_threaded_sampling_runs(self):
        _, log = self.run_training(small_config(iterations=3), workers=2)
        self.assertTrue(np.all(np.isfinite(log.to_frame()["total"])))

    def test_non_finite_field_raises(self):
        params = init_field(self.field_config, FieldDomain.from_grid(self.grid), 0)
        params.geometry_hash.data = np.full(params.geometry_hash.shape, np.nan, dtype=np.float32)
        with self.assertRaises(TrainingDivergedError) as ctx:
            self.run_training(small_config(iterations=1), resume=(params, AdamState()))
        self.assertEqual(ctx.exception.iteration, 0)

    def test_dataset_without_observations_rejected(self):
        empty = Dataset(images=(), scans=(), bounds=Bounds(np.zeros(3), np.ones(3)))
        with self.assertRaises(ValueError):
            train(empty, self.grid, small_config(), self.field_config)


SLOW = os.getenv("M2MAP_SLOW_TESTS", "0") == "1"
SPHERE_RADIUS = 0.5
SPHERE_ITERATIONS = 3000


@functools.lru_cache(maxsize=None)
def sphere_fixture():
    """Lambertian sphere at the origin seen from an orbit of small cameras: (spec, train set, held-out set)."""
    spec = sphere_scene(radius=SPHERE_RADIUS)
    bounds = Bounds(np.full(3, -1.4), np.full(3, 1.4))
    camera = small_camera(size=32, focal=30.0)
    poses = orbit_trajectory((0.0, 0.0, 0.0), 1.1, 0.4, 8)
    dataset = generate_synthetic(spec, poses, camera, 2000, 0.0, 0, bounds)
    held = orbit_trajectory((0.0, 0.0, 0.0), 1.1, 0.4, 2, phase=np.pi / 8)
    held_out = generate_synthetic(spec, held, camera, 0, 0.0, 1, bounds)
    return spec, dataset, held_out


@functools.lru_cache(maxsize=None)
def sphere_run(rgb_enabled: bool):
    """One 3000-iteration run per setting, shared by the checks below."""
    _, dataset, _ = sphere_fixture()
    config = PipelineConfig()
    grid = build_grid(dataset.scans, dataset.bounds, config.occupancy.voxel_size)
    grid = classify_visible(grid, dataset.images, config.occupancy.ray_stride)
    train_config = replace(config.train, iterations=SPHERE_ITERATIONS, rgb_enabled=rgb_enabled)
    params, log = train(dataset, grid, train_config, config.field_config(), config.sampler, config.render)
    return params, grid, log.to_frame()


@pytest.mark.slow
@unittest.skipUnless(SLOW, "set M2MAP_SLOW_TESTS=1 for sphere training runs")
class TestSphereTraining(unittest.TestCase):

    def test_sdf_loss_drops_below_a_tenth(self):
        frame = sphere_run(False)[2]
        initial = float(frame["sdf"].iloc[:10].mean())
        final = float(frame["sdf"].tail(100).mean())
        self.assertLess(final, 0.1 * initial)

    def test_moving_average_of_total_loss_decreases(self):
        frame = sphere_run(False)[2]
        averages = frame["total"].rolling(100).mean().iloc[99::100].to_numpy()
        self.assertEqual(len(averages), SPHERE_ITERATIONS // 100)
        # 2% slack for minibatch noise between neighbouring windows
        self.assertTrue(np.all(averages[1:] <= averages[:-1] * 1.02))
        self.assertLess(averages[-1], averages[0])

    def test_sdf_matches_analytic_distance_near_surface(self):
        params, grid, _ = sphere_run(False)
        rng = np.random.default_rng(0)
        directions = fibonacci_directions(2000)
        radii = SPHERE_RADIUS + rng.uniform(-grid.voxel_size, grid.voxel_size, size=len(directions))
        points = directions * radii[:, None]
        s, beta = eval_sdf(params, points)
        error = np.abs(s - (radii - SPHERE_RADIUS))
        self.assertGreaterEqual(float(np.mean(error < 2.0 * grid.voxel_size)), 0.95)
        self.assertTrue(np.all(beta > 0.0))

    def test_rendered_albedo_matches_reference_shading(self):
        params, grid, _ = sphere_run(True)
        _, _, held_out = sphere_fixture()
        config = PipelineConfig()
        renderer = Renderer(params, grid, config.sampler, config.render)
        errors = []
        for image in held_out.images:
            camera = image.intrinsics
            vs, us = np.mgrid[0:camera.height, 0:camera.width]
            origins, directions = pixel_rays(camera, image.pose, us.ravel(), vs.ravel())
            along = np.einsum("ij,ij->i", -origins, directions)
            closest = np.linalg.norm(origins + along[:, None] * directions, axis=-1)
            # pixels well inside the silhouette
            inside = closest < 0.8 * SPHERE_RADIUS
            result = renderer.render_rays(origins[inside], directions[inside])
            reference = image.pixels.reshape(-1, 3)[inside]
            errors.append(np.abs(result.color - reference).mean(axis=-1))
        errors = np.concatenate(errors)
        self.assertGreater(len(errors), 100)
        self.assertLess(float(errors.mean()), 0.05)


if __name__ == '__main__':
    unittest.main()
