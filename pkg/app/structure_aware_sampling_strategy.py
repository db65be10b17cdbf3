from __future__ import annotations

from typing import List, Tuple

import numpy as np

from app.density import sdf_to_density
from app.occupancy import OccupancyGrid, encoded_mask, grid_exit, next_encoded_entries
from app.sampling_strategy import GeometryFn, RaySampler, SampleBatch


# Fraction of a voxel added past a cell entry so the position reads as inside the cell.
_ENTRY_NUDGE = 1e-6


class StructureAwareSampler(RaySampler):
    """
    Adaptive sphere tracing with a filtered SDF slope and free-space skipping.

    Each ray starts with slope m = -1 and transmittance 1 and repeatedly
    proposes a step 2|s| / (1 - m). A step is accepted when it cannot have
    jumped over a surface wider than 3 beta (delta <= |s_i| + |s_i+1| + 3 beta_i);
    the accepted interval becomes a sample whose density uses the slope
    before the update, after which m relaxes toward the measured slope with
    coefficient gamma. Steps proposed at m = -1 are always taken. A rejected
    step resets m to -1, which turns the next proposal into a plain
    sphere-tracing step. Marching continues through
    the surface until s <= 0 and the transmittance drops below eps_T.

    Whenever a step lands in a cell outside the encoded set (Free or
    InvisibleUnknown) the ray jumps to the next encoded cell without
    emitting a sample or touching m.
    """

    name = "structure_aware"

    def sample(self, geometry: GeometryFn, grid: OccupancyGrid, origins: np.ndarray, directions: np.ndarray) -> SampleBatch:
        cfg = self._resolved(grid)
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        count = len(origins)
        mask = encoded_mask(grid)
        nudge = _ENTRY_NUDGE * grid.voxel_size

        t_exit = grid_exit(grid, origins, directions)
        entry = next_encoded_entries(grid, origins, directions, np.zeros(count), mask)
        active = np.isfinite(entry) & np.isfinite(t_exit)
        t = np.where(active, _nudged(entry, 0.0, nudge, t_exit), 0.0)

        s = np.zeros(count)
        beta = np.ones(count)
        m = np.full(count, -1.0)
        T = np.ones(count)
        converged = np.ones(count, dtype=bool)
        if active.any():
            ids = np.flatnonzero(active)
            s[ids], beta[ids] = self._evaluate(geometry, origins, directions, t[ids], ids)

        columns: List[Tuple[np.ndarray, ...]] = []
        for _ in range(cfg.max_steps):
            ids = np.flatnonzero(active)
            if len(ids) == 0:
                break
            s_i, beta_i, m_i, t_i = s[ids], beta[ids], m[ids], t[ids]

            delta = np.maximum(np.abs(s_i) * 2.0 / (1.0 - m_i), cfg.delta_min)
            last = t_i + delta >= t_exit[ids]
            delta = np.where(last, np.maximum(t_exit[ids] - t_i, cfg.delta_min), delta)
            t_next = t_i + delta
            s_next, beta_next = self._evaluate(geometry, origins, directions, t_next, ids)

            # At m = -1 only the delta_min floor can exceed the bound; take the step so the ray keeps moving.
            accept = (delta <= np.abs(s_i) + np.abs(s_next) + 3.0 * beta_i) | (m_i <= -1.0)
            m[ids[~accept]] = -1.0

            acc = ids[accept]
            if len(acc) == 0:
                continue
            d_acc, s_acc, b_acc, m_acc = delta[accept], s_i[accept], beta_i[accept], m_i[accept]
            sigma = sdf_to_density(s_acc, b_acc, m_acc)
            T[acc] *= np.exp(-sigma * d_acc)
            columns.append((acc, t_i[accept], d_acc, m_acc, s_acc, b_acc))

            measured = (s_next[accept] - s_acc) / d_acc
            m[acc] = np.minimum(cfg.gamma * m_acc + (1.0 - cfg.gamma) * measured, 0.0)
            t[acc] = t_next[accept]
            s[acc] = s_next[accept]
            beta[acc] = beta_next[accept]

            done = last[accept] | ((s[acc] <= 0.0) & (T[acc] <= cfg.eps_T))
            active[acc[done]] = False
            self._skip_free_space(geometry, grid, mask, origins, directions, acc[~done], t, s, beta, active, t_exit, nudge)

        converged[active] = False
        self._report(converged, self.name)
        return SampleBatch.pack(origins, directions, columns, converged)

    @staticmethod
    def _evaluate(geometry: GeometryFn, origins, directions, t, ids) -> Tuple[np.ndarray, np.ndarray]:
        """Field values at ray(t) for the rays `ids` (t aligned with ids)."""
        points = origins[ids] + t[:, None] * directions[ids]
        s, beta = geometry(points)
        return np.asarray(s, dtype=np.float64), np.asarray(beta, dtype=np.float64)

    def _skip_free_space(self, geometry, grid, mask, origins, directions, ids, t, s, beta, active, t_exit, nudge) -> None:
        """Move rays standing in non-encoded cells to the next encoded cell entry (in place)."""
        if len(ids) == 0:
            return
        idx, inside = grid.cell_of(origins[ids] + t[ids][:, None] * directions[ids])
        encoded = np.zeros(len(ids), dtype=bool)
        encoded[inside] = mask[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
        jump = ids[~encoded]
        if len(jump) == 0:
            return
        entry = next_encoded_entries(grid, origins[jump], directions[jump], t[jump], mask)
        gone = ~np.isfinite(entry)
        active[jump[gone]] = False
        moved = jump[~gone]
        if len(moved) == 0:
            return
        t[moved] = _nudged(entry[~gone], t[moved], nudge, t_exit[moved])
        s[moved], beta[moved] = self._evaluate(geometry, origins, directions, t[moved], moved)


def _nudged(entry: np.ndarray, start, nudge: float, t_exit: np.ndarray) -> np.ndarray:
    """Entry distances moved just past the cell face when the ray actually jumped."""
    return np.where(entry > start, np.minimum(entry + nudge, t_exit), entry)
