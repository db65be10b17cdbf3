from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from app.autodiff import Tensor, as_tensor


HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)
SH_DEGREE = 4
SH_COEFFICIENTS = (SH_DEGREE + 1) ** 2

# 8 cube corners as {0,1}^3 offsets, x slowest.
_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


@dataclass(frozen=True)
class HashEncodingConfig:
    levels: int = 8
    base_resolution: int = 16
    max_resolution: int = 512
    table_size: int = 2 ** 15
    feature_dim: int = 2

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_resolution < 1 or self.max_resolution < self.base_resolution:
            raise ValueError(
                f"Resolutions must satisfy 1 <= base <= max, got {self.base_resolution}..{self.max_resolution}"
            )
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")

    @classmethod
    def full_scale(cls) -> "HashEncodingConfig":
        return cls(levels=16, base_resolution=2 ** 5, max_resolution=2 ** 21, table_size=2 ** 19, feature_dim=2)

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return float(np.exp((np.log(self.max_resolution) - np.log(self.base_resolution)) / (self.levels - 1)))

    def resolutions(self) -> np.ndarray:
        """Cells per axis for each level, geometric from base to max."""
        levels = np.arange(self.levels)
        return np.floor(self.base_resolution * self.growth ** levels + 1e-6).astype(np.int64)

    @property
    def output_dim(self) -> int:
        return self.levels * self.feature_dim


def spatial_hash(corners: np.ndarray, table_size: int) -> np.ndarray:
    """(i*p1 xor j*p2 xor k*p3) mod table_size on integer vertex coordinates [..., 3]."""
    c = corners.astype(np.uint64) * HASH_PRIMES
    h = np.bitwise_xor(np.bitwise_xor(c[..., 0], c[..., 1]), c[..., 2])
    return (h % np.uint64(table_size)).astype(np.int64)


def _level_lookup(x: np.ndarray, resolution: int, table_size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Corner hash indices [8, B], trilinear weights [8, B], fractions [B, 3], per-axis factors [8, B, 3]."""
    scaled = x * resolution
    base = np.minimum(np.floor(scaled).astype(np.int64), resolution - 1)
    frac = scaled - base
    corners = base[None, :, :] + _CORNERS[:, None, :]
    idx = spatial_hash(corners, table_size)
    factors = np.where(_CORNERS[:, None, :] == 1, frac[None], 1.0 - frac[None])
    return idx, factors.prod(axis=-1), frac, factors


def hash_encode(config: HashEncodingConfig, tables: Tensor, x) -> Tensor:
    """Multi-resolution hash encoding as a single graph node.

    Args:
        config: encoding layout
        tables: [levels, table_size, feature_dim] trainable entries
        x: [B, 3] normalised coordinates; values outside [0, 1] are clamped

    Returns:
        [B, levels * feature_dim] tensor differentiable w.r.t. `tables` and `x`.
    """
    x = as_tensor(x)
    raw = np.atleast_2d(x.data.astype(np.float64))
    inside = (raw > 0.0) & (raw < 1.0)
    xc = np.clip(raw, 0.0, 1.0)
    table_data = tables.data
    levels, table_size, feature_dim = table_data.shape
    resolutions = config.resolutions()
    batch = len(xc)

    lookups = []
    out = np.empty((batch, levels * feature_dim), dtype=table_data.dtype)
    for level, resolution in enumerate(resolutions):
        idx, weights, frac, factors = _level_lookup(xc, int(resolution), table_size)
        entries = table_data[level][idx]
        out[:, level * feature_dim:(level + 1) * feature_dim] = (weights[..., None] * entries).sum(axis=0)
        lookups.append((idx, weights, factors))

    def backward(g: np.ndarray):
        g = g.reshape(batch, levels, feature_dim)
        grad_tables = None
        if tables.requires_grad:
            grad_tables = np.zeros((levels, table_size, feature_dim), dtype=np.float64)
            for level, (idx, weights, _) in enumerate(lookups):
                flat = idx.ravel()
                for f in range(feature_dim):
                    contrib = (weights * g[None, :, level, f]).ravel()
                    grad_tables[level, :, f] = np.bincount(flat, weights=contrib, minlength=table_size)
        grad_x = None
        if x.requires_grad:
            grad_x = np.zeros((batch, 3), dtype=np.float64)
            for level, (idx, _, factors) in enumerate(lookups):
                resolution = float(resolutions[level])
                # d(entry . g) per corner: [8, B]
                projected = (table_data[level][idx].astype(np.float64) * g[None, :, level, :]).sum(axis=-1)
                for axis in range(3):
                    others = np.prod(np.delete(factors, axis, axis=-1), axis=-1)
                    sign = np.where(_CORNERS[:, axis] == 1, 1.0, -1.0)[:, None]
                    grad_x[:, axis] += resolution * (projected * sign * others).sum(axis=0)
            grad_x = (grad_x * inside).reshape(x.shape)
        return (grad_tables, grad_x)

    return Tensor.from_op(out, (tables, x), backward, "hash_encode")


# ---- directional encoding ----

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
_C3 = (
    -0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
    -0.4570457994644658, 1.445305721320277, -0.5900435899266435,
)
_C4 = (
    2.5033429417967046, -1.7701307697799304, 0.9461746957575601, -0.6690465435572892,
    0.10578554691520431, -0.6690465435572892, 0.47308734787878004, -1.7701307697799304,
    0.6258357354491761,
)


@dataclass(frozen=True)
class DegreeWindow:
    """Soft cut-off over SH bands: band l has gain clip(active_degree - l + 1, 0, 1)."""

    active_degree: float = float(SH_DEGREE)

    def __post_init__(self) -> None:
        if not 0.0 <= self.active_degree <= SH_DEGREE:
            raise ValueError(f"active_degree must lie in [0, {SH_DEGREE}], got {self.active_degree}")

    def band_gains(self) -> np.ndarray:
        bands = np.arange(SH_DEGREE + 1)
        gains = np.clip(self.active_degree - bands + 1.0, 0.0, 1.0)
        gains[0] = 1.0
        return gains

    def coefficient_gains(self) -> np.ndarray:
        """Band gains expanded to the 25 coefficients (band l spans 2l+1 entries)."""
        return np.repeat(self.band_gains(), 2 * np.arange(SH_DEGREE + 1) + 1)


def sh_basis(directions: np.ndarray) -> np.ndarray:
    """Real spherical harmonics up to degree 4 for unit directions [N, 3] -> [N, 25].

    Coefficient l*l + l + m holds order m of band l.
    """
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.empty((len(d), SH_COEFFICIENTS))
    out[:, 0] = _C0
    out[:, 1] = -_C1 * y
    out[:, 2] = _C1 * z
    out[:, 3] = -_C1 * x
    out[:, 4] = _C2[0] * xy
    out[:, 5] = _C2[1] * yz
    out[:, 6] = _C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = _C2[3] * xz
    out[:, 8] = _C2[4] * (xx - yy)
    out[:, 9] = _C3[0] * y * (3 * xx - yy)
    out[:, 10] = _C3[1] * xy * z
    out[:, 11] = _C3[2] * y * (4 * zz - xx - yy)
    out[:, 12] = _C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[:, 13] = _C3[4] * x * (4 * zz - xx - yy)
    out[:, 14] = _C3[5] * z * (xx - yy)
    out[:, 15] = _C3[6] * x * (xx - 3 * yy)
    out[:, 16] = _C4[0] * xy * (xx - yy)
    out[:, 17] = _C4[1] * yz * (3 * xx - yy)
    out[:, 18] = _C4[2] * xy * (7 * zz - 1)
    out[:, 19] = _C4[3] * yz * (7 * zz - 3)
    out[:, 20] = _C4[4] * (zz * (35 * zz - 30) + 3)
    out[:, 21] = _C4[5] * xz * (7 * zz - 3)
    out[:, 22] = _C4[6] * (xx - yy) * (7 * zz - 1)
    out[:, 23] = _C4[7] * xz * (xx - 3 * yy)
    out[:, 24] = _C4[8] * (xx * (xx - 3 * yy) - yy * (3 * xx - yy))
    return out


def sh_encode(directions: np.ndarray, window: DegreeWindow) -> np.ndarray:
    """Windowed SH coefficients for unit view directions ([3] or [N, 3])."""
    d = np.asarray(directions, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    norms = np.linalg.norm(d, axis=-1)
    if np.any(norms < 1e-12):
        raise ValueError("sh_encode: zero-length direction")
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError(f"sh_encode: directions must be unit length (max |norm-1| = {np.abs(norms - 1).max():.3g})")
    values = sh_basis(d) * window.coefficient_gains()
    return values[0] if single else values
