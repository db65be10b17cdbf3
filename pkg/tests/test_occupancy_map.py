"""
Occupancy grid construction, visibility classification, voxel traversal and grid files.
"""

import tempfile
import unittest
import sys
import os
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from app.dataset_io import read_ply_points
from app.occupancy import (
    CellState,
    GridFormatError,
    OccupancyGrid,
    build_grid,
    classify_visible,
    encoded_mask,
    export_state_clouds,
    grid_exit,
    load_grid,
    next_encoded_entries,
    next_encoded_entry,
    raycast_dda,
    save_grid,
    state_at,
)
from app.scene import Bounds, CameraIntrinsics, PointScan, Pose, PosedImage, Ray
from tests.test_helpers import (
    cells_of,
    desk_dataset,
    grid_with_cells,
    oracle_build,
    random_unit,
    segment_cells,
)

pytestmark = pytest.mark.occupancy

FREE, OCC = CellState.FREE, CellState.OCCUPIED
UNK, VIS = CellState.INVISIBLE_UNKNOWN, CellState.VISIBLE_UNKNOWN


def line_grid(states):
    return grid_with_cells(np.asarray(states, dtype=np.uint8).reshape(-1, 1, 1))


def x_ray(x0=-0.5):
    return Ray(origin=np.array([x0, 0.5, 0.5]), direction=np.array([1.0, 0.0, 0.0]))


class TestVoxelTraversal(unittest.TestCase):

    def test_axis_aligned_walk_visits_cells_in_order(self):
        grid = line_grid([UNK] * 4)
        traversal = raycast_dda(grid, x_ray(-1.0), t_max=10.0)
        self.assertEqual(cells_of(traversal), [(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)])
        for n, (_, t_in, t_out) in enumerate(traversal):
            self.assertAlmostEqual(t_in, 1.0 + n)
            self.assertAlmostEqual(t_out, 2.0 + n)

    def test_walk_respects_t_window(self):
        grid = line_grid([UNK] * 4)
        traversal = raycast_dda(grid, x_ray(-1.0), t_max=2.5, t_min=1.5)
        self.assertEqual(cells_of(traversal), [(0, 0, 0), (1, 0, 0)])
        self.assertAlmostEqual(traversal[0][1], 1.5)
        self.assertAlmostEqual(traversal[-1][2], 2.5)

    def test_ray_missing_grid_is_empty(self):
        grid = line_grid([UNK] * 4)
        ray = Ray(origin=np.array([-1.0, 5.0, 0.5]), direction=np.array([1.0, 0.0, 0.0]))
        self.assertEqual(raycast_dda(grid, ray, t_max=10.0), [])
        self.assertTrue(np.isnan(grid_exit(grid, ray.origin, ray.direction)[0]))

    def test_non_positive_t_max_rejected(self):
        with self.assertRaises(ValueError):
            raycast_dda(line_grid([UNK]), x_ray(), t_max=0.0)

    def test_matches_brute_force_box_intersection(self):
        rng = np.random.default_rng(11)
        bounds = Bounds(np.zeros(3), np.full(3, 2.0))
        grid = OccupancyGrid.empty(bounds, 0.25)
        origins = rng.uniform(-1.0, 3.0, size=(60, 3))
        directions = random_unit(rng, 60)
        for origin, direction in zip(origins, directions):
            traversal = raycast_dda(grid, Ray(origin=origin, direction=direction), t_max=6.0)
            visited = {cell for cell, a, b in traversal if b - a > 1e-9}
            self.assertEqual(visited, segment_cells(grid, origin, direction, 0.0, 6.0))
            for (_, _, t_out), (_, t_in, _) in zip(traversal, traversal[1:]):
                self.assertAlmostEqual(t_out, t_in, places=9)

    def test_next_encoded_entry_skips_free_cells(self):
        grid = line_grid([FREE] * 5 + [OCC])
        self.assertAlmostEqual(next_encoded_entry(grid, x_ray(), 0.0), 5.5)

    def test_next_encoded_entry_inside_encoded_cell_is_t(self):
        grid = line_grid([FREE] * 5 + [OCC])
        self.assertAlmostEqual(next_encoded_entry(grid, x_ray(), 5.7), 5.7)

    def test_next_encoded_entry_none_past_last_cell(self):
        grid = line_grid([OCC, FREE, FREE])
        self.assertIsNone(next_encoded_entry(grid, x_ray(), 2.0))
        with self.assertRaises(ValueError):
            next_encoded_entry(grid, x_ray(), -1.0)

    def test_visible_unknown_counts_as_encoded(self):
        grid = line_grid([FREE, UNK, VIS, OCC])
        self.assertAlmostEqual(next_encoded_entry(grid, x_ray(), 0.0), 2.5)
        batch = next_encoded_entries(
            grid,
            np.array([[-0.5, 0.5, 0.5], [-0.5, 0.5, 0.5]]),
            np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]),
            np.zeros(2),
        )
        self.assertAlmostEqual(batch[0], 2.5)
        self.assertTrue(np.isnan(batch[1]))


class TestBuildGrid(unittest.TestCase):

    def test_single_ray_marks_free_then_occupied(self):
        bounds = Bounds(np.zeros(3), np.array([6.0, 1.0, 1.0]))
        scan = PointScan(origin=np.array([0.5, 0.5, 0.5]), points=np.array([[4.5, 0.5, 0.5]]))
        grid = build_grid([scan], bounds, 1.0)
        np.testing.assert_array_equal(grid.cells[:, 0, 0], [FREE, FREE, FREE, FREE, OCC, UNK])

    def test_free_never_overrides_occupied(self):
        bounds = Bounds(np.zeros(3), np.array([6.0, 1.0, 1.0]))
        scan = PointScan(
            origin=np.array([0.5, 0.5, 0.5]),
            points=np.array([[2.5, 0.5, 0.5], [5.5, 0.5, 0.5]]),
        )
        grid = build_grid([scan], bounds, 1.0)
        np.testing.assert_array_equal(grid.cells[:, 0, 0], [FREE, FREE, OCC, FREE, FREE, OCC])

    def test_points_outside_grid_skipped_and_counted(self):
        bounds = Bounds(np.zeros(3), np.full(3, 2.0))
        scan = PointScan(origin=np.full(3, 1.0), points=np.array([[1.5, 1.0, 1.0], [9.0, 1.0, 1.0]]))
        with self.assertLogs(level="WARNING") as logs:
            grid = build_grid([scan], bounds, 0.5)
        self.assertEqual(grid.skipped_points, 1)
        self.assertIn("Skipped 1", "\n".join(logs.output))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        bounds = Bounds(np.zeros(3), np.full(3, 2.0))
        scans = [
            PointScan(origin=rng.uniform(0.2, 1.8, size=3), points=rng.uniform(0.0, 2.0, size=(25, 3)))
            for _ in range(3)
        ]
        grid = build_grid(scans, bounds, 0.25)
        origins = np.concatenate([np.broadcast_to(s.origin, s.points.shape) for s in scans])
        points = np.concatenate([s.points for s in scans])
        np.testing.assert_array_equal(grid.cells, oracle_build(grid, origins, points))

    def test_worker_count_does_not_change_result(self):
        _, dataset = desk_dataset(views=3, size=8, rays=300, seed=2)
        serial = build_grid(dataset.scans, dataset.bounds, 0.1, workers=1)
        threaded = build_grid(dataset.scans, dataset.bounds, 0.1, workers=3)
        np.testing.assert_array_equal(serial.cells, threaded.cells)
        np.testing.assert_array_equal(
            classify_visible(serial, dataset.images, ray_stride=2, workers=1).cells,
            classify_visible(threaded, dataset.images, ray_stride=2, workers=3).cells,
        )

    def test_scan_endpoints_and_sensor_cells(self):
        _, dataset = desk_dataset(views=2, size=8, rays=300, seed=4)
        grid = build_grid(dataset.scans, dataset.bounds, 0.1)
        for scan in dataset.scans:
            self.assertTrue(np.all(state_at(grid, scan.points) == OCC))
            self.assertIn(state_at(grid, scan.origin)[0], (FREE, OCC))

    def test_empty_scan_list_gives_all_unknown(self):
        grid = build_grid([], Bounds(np.zeros(3), np.ones(3)), 0.5)
        self.assertTrue(np.all(grid.cells == UNK))
        self.assertFalse(encoded_mask(grid).any())

    def test_more_observations_never_demote_a_cell(self):
        rng = np.random.default_rng(11)
        bounds = Bounds(np.zeros(3), np.full(3, 2.0))
        scans = [
            PointScan(origin=rng.uniform(0.2, 1.8, size=3), points=rng.uniform(0.0, 2.0, size=(30, 3)))
            for _ in range(4)
        ]
        base = build_grid(scans[:2], bounds, 0.25)
        more_scans = build_grid(scans, bounds, 0.25)
        extra = rng.uniform(0.0, 2.0, size=(40, 3))
        more_points = build_grid(
            [PointScan(scans[0].origin, np.concatenate([scans[0].points, extra])), scans[1]], bounds, 0.25
        )
        for grown in (more_scans, more_points):
            self.assertTrue(np.all(grown.cells >= base.cells))
            self.assertTrue(np.all(grown.cells[base.cells == OCC] == OCC))


class TestVisibility(unittest.TestCase):

    def setUp(self):
        # One-pixel camera looking down +x through the middle of a 4x1x1 line of cells.
        camera = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.5, cy=0.5, width=1, height=1)
        rotation = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        pose = Pose(rotation, np.array([-0.5, 0.5, 0.5]))
        self.image = PosedImage(camera, pose, np.zeros((1, 1, 3)))

    def test_unknown_cells_before_first_occupied_become_visible(self):
        grid = line_grid([UNK, UNK, OCC, UNK])
        cells = classify_visible(grid, [self.image], ray_stride=1).cells[:, 0, 0]
        np.testing.assert_array_equal(cells, [VIS, VIS, OCC, UNK])

    def test_free_cells_are_left_alone(self):
        grid = line_grid([FREE, UNK, OCC, UNK])
        cells = classify_visible(grid, [self.image], ray_stride=1).cells[:, 0, 0]
        np.testing.assert_array_equal(cells, [FREE, VIS, OCC, UNK])

    def test_ray_without_occupied_cell_marks_to_boundary(self):
        grid = line_grid([UNK, FREE, UNK])
        cells = classify_visible(grid, [self.image], ray_stride=1).cells[:, 0, 0]
        np.testing.assert_array_equal(cells, [VIS, FREE, VIS])

    def test_bad_stride_rejected(self):
        with self.assertRaises(ValueError):
            classify_visible(line_grid([UNK]), [self.image], ray_stride=0)

    def test_desk_visibility_only_promotes_unknown(self):
        _, dataset = desk_dataset(views=3, size=12, rays=400, seed=1)
        grid = build_grid(dataset.scans, dataset.bounds, 0.1)
        seen = classify_visible(grid, dataset.images, ray_stride=1)
        changed = seen.cells != grid.cells
        self.assertTrue(changed.any())
        self.assertTrue(np.all(grid.cells[changed] == UNK))
        self.assertTrue(np.all(seen.cells[changed] == VIS))

    def test_second_visibility_pass_changes_nothing(self):
        _, dataset = desk_dataset(views=3, size=12, rays=400, seed=6)
        grid = build_grid(dataset.scans, dataset.bounds, 0.1)
        once = classify_visible(grid, dataset.images, ray_stride=2)
        twice = classify_visible(once, dataset.images, ray_stride=2)
        np.testing.assert_array_equal(twice.cells, once.cells)
        self.assertEqual(twice.skipped_points, once.skipped_points)


class TestGridFiles(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        rng = np.random.default_rng(0)
        self.grid = OccupancyGrid(
            origin=np.array([-1.0, -1.0, -0.2]),
            voxel_size=0.1,
            dims=(4, 5, 6),
            cells=rng.integers(0, 4, size=(4, 5, 6)),
            skipped_points=7,
        )

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_load_round_trip(self):
        path = self.dir / "map.occ"
        save_grid(self.grid, path)
        loaded = load_grid(path)
        np.testing.assert_array_equal(loaded.cells, self.grid.cells)
        np.testing.assert_array_equal(loaded.origin, self.grid.origin)
        self.assertEqual(loaded.voxel_size, 0.1)
        self.assertEqual(loaded.dims, (4, 5, 6))
        self.assertEqual(loaded.skipped_points, 7)

    def test_corrupt_files_rejected(self):
        path = self.dir / "map.occ"
        save_grid(self.grid, path)
        raw = path.read_bytes()

        path.write_bytes(b"NOTAGRID" + raw[8:])
        with self.assertRaises(GridFormatError):
            load_grid(path)

        path.write_bytes(raw[:-3])
        with self.assertRaises(GridFormatError):
            load_grid(path)

        path.write_bytes(raw[:-1] + bytes([9]))
        with self.assertRaises(GridFormatError):
            load_grid(path)

        with self.assertRaises(GridFormatError):
            load_grid(self.dir / "missing.occ")

    def test_state_clouds_count_cells(self):
        written = export_state_clouds(self.grid, self.dir / "states")
        self.assertEqual(len(written), 4)
        for path, state in zip(written, CellState):
            self.assertEqual(len(read_ply_points(path)), int((self.grid.cells == state).sum()))


if __name__ == '__main__':
    unittest.main()
