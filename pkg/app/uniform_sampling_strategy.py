from __future__ import annotations

import numpy as np

from app.occupancy import OccupancyGrid, box_interval
from app.sampling_strategy import GeometryFn, RaySampler, SampleBatch


class UniformSampler(RaySampler):
    """Evenly spaced samples across the grid box; slopes from consecutive SDF differences.

    Reference strategy for comparisons and tests. It ignores cell states and
    spends `uniform_samples` evaluations on every ray that crosses the grid.
    """

    name = "uniform"

    def sample(self, geometry: GeometryFn, grid: OccupancyGrid, origins: np.ndarray, directions: np.ndarray) -> SampleBatch:
        cfg = self._resolved(grid)
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        count = len(origins)
        n = cfg.uniform_samples
        converged = np.ones(count, dtype=bool)

        t_near, t_far = box_interval(grid, origins, directions)
        t_near = np.maximum(t_near, 0.0)
        hit = np.flatnonzero(t_far > t_near)
        if len(hit) == 0:
            return SampleBatch.pack(origins, directions, [], converged)

        span = (t_far - t_near)[hit]
        delta = span / n
        t = t_near[hit, None] + (np.arange(n)[None, :] + 0.5) * delta[:, None]  # [H, n]
        points = origins[hit, None, :] + t[..., None] * directions[hit, None, :]
        s, beta = geometry(points.reshape(-1, 3))
        s = np.asarray(s, dtype=np.float64).reshape(len(hit), n)
        beta = np.asarray(beta, dtype=np.float64).reshape(len(hit), n)

        slope = np.empty_like(s)
        slope[:, :-1] = np.diff(s, axis=1) / delta[:, None]
        slope[:, -1] = slope[:, -2]
        slope = np.minimum(slope, 0.0)

        ray_ids = np.repeat(hit, n)
        columns = [(ray_ids, t.ravel(), np.repeat(delta, n), slope.ravel(), s.ravel(), beta.ravel())]
        return SampleBatch.pack(origins, directions, columns, converged)
