"""
Joint signed-distance / radiance field.

Geometry:   hash features (geometry table) -> MLP -> (s, beta_raw),
            beta = softplus(beta_raw) + beta_min
Appearance: hash features (appearance table) ++ windowed SH(d) -> MLP -> sigmoid rgb

World positions are normalised into [0, 1]^3 over the cube
center +- (map_radius + boundary) before encoding.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from app.autodiff import Tensor, concat, no_grad, parameter
from app.dataset_io import atomic_write
from app.encoding import SH_COEFFICIENTS, DegreeWindow, HashEncodingConfig, hash_encode, sh_encode
from app.occupancy import OccupancyGrid


EVAL_CHUNK = 65536


class CheckpointError(ValueError):
    """Raised when a checkpoint is unreadable or belongs to another configuration."""


@dataclass(frozen=True)
class FieldConfig:
    encoding: HashEncodingConfig = field(default_factory=HashEncodingConfig)
    hidden_width: int = 64
    hidden_layers: int = 3
    beta_min: float = 1e-4
    initial_beta: float = 0.05
    init_radius: Optional[float] = None  # default 0.3 * map radius
    sphere_init_iterations: int = 500
    dtype: str = "float32"
    fixed_beta: Optional[float] = None

    def __post_init__(self) -> None:
        if self.hidden_width < 1 or self.hidden_layers < 1:
            raise ValueError("MLP width and depth must be >= 1")
        if self.beta_min <= 0 or self.initial_beta <= self.beta_min:
            raise ValueError(f"Need 0 < beta_min < initial_beta, got {self.beta_min}, {self.initial_beta}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.fixed_beta is not None and self.fixed_beta <= 0:
            raise ValueError(f"fixed_beta must be positive, got {self.fixed_beta}")


@dataclass(frozen=True)
class FieldDomain:
    center: Tuple[float, float, float]
    map_radius: float
    boundary: float

    @classmethod
    def from_grid(cls, grid: OccupancyGrid) -> "FieldDomain":
        return cls(tuple(float(c) for c in grid.center), grid.radius, grid.voxel_size)

    @property
    def half_size(self) -> float:
        return self.map_radius + self.boundary

    def normalize(self, x):
        """World -> [0, 1]^3 (works on arrays and tensors)."""
        low = np.asarray(self.center, dtype=getattr(x, "dtype", np.float64)) - self.half_size
        return (x - low) * (1.0 / (2.0 * self.half_size))


@dataclass
class FieldParameters:
    config: FieldConfig
    domain: FieldDomain
    geometry_hash: Tensor
    appearance_hash: Tensor
    geometry_mlp: List[Tuple[Tensor, Tensor]]
    appearance_mlp: List[Tuple[Tensor, Tensor]]
    sphere_blend: float = 1.0

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {"geometry_hash": self.geometry_hash, "appearance_hash": self.appearance_hash}
        for prefix, layers in (("geometry_mlp", self.geometry_mlp), ("appearance_mlp", self.appearance_mlp)):
            for i, (weight, bias) in enumerate(layers):
                named[f"{prefix}.{i}.weight"] = weight
                named[f"{prefix}.{i}.bias"] = bias
        return named

    def geometry_names(self) -> List[str]:
        return [n for n in self.named_parameters() if n.startswith("geometry")]

    def appearance_names(self) -> List[str]:
        return [n for n in self.named_parameters() if n.startswith("appearance")]

    def zero_grad(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.grad = None

    @property
    def init_radius(self) -> float:
        if self.config.init_radius is not None:
            return self.config.init_radius
        return 0.3 * self.domain.map_radius


def _softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _init_mlp(rng: np.random.Generator, sizes: List[int], dtype, out_scale: float) -> List[Tuple[Tensor, Tensor]]:
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        std = (out_scale if last else np.sqrt(2.0)) / np.sqrt(fan_in)
        weight = rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)
        layers.append((parameter(weight), parameter(np.zeros(fan_out, dtype=dtype))))
    return layers


def init_field(config: FieldConfig, domain: FieldDomain, seed: int) -> FieldParameters:
    """Fresh parameters: tables uniform in +-1e-4, small MLP weights, sphere prior fully on."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    enc = config.encoding
    table_shape = (enc.levels, enc.table_size, enc.feature_dim)
    hidden = [config.hidden_width] * config.hidden_layers

    geometry_mlp = _init_mlp(rng, [enc.output_dim, *hidden, 2], dtype, out_scale=0.1)
    geometry_mlp[-1][1].data[1] = _softplus_inverse(config.initial_beta - config.beta_min)
    return FieldParameters(
        config=config,
        domain=domain,
        geometry_hash=parameter(rng.uniform(-1e-4, 1e-4, size=table_shape).astype(dtype)),
        appearance_hash=parameter(rng.uniform(-1e-4, 1e-4, size=table_shape).astype(dtype)),
        geometry_mlp=geometry_mlp,
        appearance_mlp=_init_mlp(rng, [enc.output_dim + SH_COEFFICIENTS, *hidden, 3], dtype, out_scale=1.0),
        sphere_blend=1.0,
    )


def _run_mlp(layers: List[Tuple[Tensor, Tensor]], h: Tensor) -> Tensor:
    for i, (weight, bias) in enumerate(layers):
        h = h @ weight + bias
        if i < len(layers) - 1:
            h = h.relu()
    return h


def _as_position_tensor(params: FieldParameters, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.atleast_2d(np.asarray(x, dtype=np.dtype(params.config.dtype))))


def sdf_tensors(params: FieldParameters, x) -> Tuple[Tensor, Tensor]:
    """Graph-recording geometry evaluation.

    Args:
        x: [N, 3] world positions (array or Tensor)

    Returns:
        (s [N], beta [N]) tensors
    """
    x = _as_position_tensor(params, x)
    features = hash_encode(params.config.encoding, params.geometry_hash, params.domain.normalize(x))
    out = _run_mlp(params.geometry_mlp, features)
    s = out[:, 0]
    if params.sphere_blend > 0.0:
        center = np.asarray(params.domain.center, dtype=x.dtype)
        offset = x - center
        prior = (offset * offset).sum(axis=1).sqrt() - params.init_radius
        s = s + prior * params.sphere_blend
    if params.config.fixed_beta is not None:
        beta = Tensor(np.full(len(x), params.config.fixed_beta, dtype=x.dtype))
    else:
        beta = out[:, 1].softplus() + params.config.beta_min
    return s, beta


def color_tensor(params: FieldParameters, x, directions: np.ndarray, window: DegreeWindow) -> Tensor:
    """Graph-recording appearance evaluation -> [N, 3] in (0, 1)."""
    x = _as_position_tensor(params, x)
    features = hash_encode(params.config.encoding, params.appearance_hash, params.domain.normalize(x))
    sh = sh_encode(np.atleast_2d(directions), window).astype(x.dtype)
    return _run_mlp(params.appearance_mlp, concat([features, Tensor(sh)], axis=-1)).sigmoid()


def _chunked(fn, count: int):
    for start in range(0, count, EVAL_CHUNK):
        yield fn(slice(start, min(count, start + EVAL_CHUNK)))


def eval_sdf(params: FieldParameters, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(s, beta) at world positions; a single 3-vector gives scalars."""
    points = np.asarray(x, dtype=np.float64)
    single = points.ndim == 1
    points = np.atleast_2d(points)
    with no_grad():
        parts = list(_chunked(lambda sl: tuple(t.data for t in sdf_tensors(params, points[sl])), len(points)))
    s = np.concatenate([p[0] for p in parts]).astype(np.float64) if parts else np.zeros(0)
    beta = np.concatenate([p[1] for p in parts]).astype(np.float64) if parts else np.zeros(0)
    return (s[0], beta[0]) if single else (s, beta)


def eval_color(params: FieldParameters, x: np.ndarray, d: np.ndarray, window: DegreeWindow) -> np.ndarray:
    points = np.asarray(x, dtype=np.float64)
    single = points.ndim == 1
    points = np.atleast_2d(points)
    dirs = np.broadcast_to(np.atleast_2d(d), points.shape)
    with no_grad():
        parts = list(_chunked(lambda sl: color_tensor(params, points[sl], dirs[sl], window).data, len(points)))
    rgb = np.concatenate(parts).astype(np.float64) if parts else np.zeros((0, 3))
    return rgb[0] if single else rgb


def eval_sdf_only(params: FieldParameters, x: np.ndarray) -> np.ndarray:
    return eval_sdf(params, x)[0]


# ---- numerical derivatives ----

_AXES = np.eye(3)


def numerical_gradient(params: FieldParameters, x: np.ndarray, eps: float) -> np.ndarray:
    """Central-difference gradient of s, per axis (s(x+eps e_i) - s(x-eps e_i)) / 2eps."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    points = np.atleast_2d(np.asarray(x, dtype=np.float64))
    shifted = np.concatenate([points + eps * _AXES[a] for a in range(3)] + [points - eps * _AXES[a] for a in range(3)])
    s = eval_sdf_only(params, shifted).reshape(6, len(points))
    grad = ((s[:3] - s[3:]) / (2.0 * eps)).T
    return grad[0] if np.asarray(x).ndim == 1 else grad


def numerical_curvature(params: FieldParameters, x: np.ndarray, eps: float) -> np.ndarray:
    """Laplacian estimate: sum over axes of second central differences of s."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    points = np.atleast_2d(np.asarray(x, dtype=np.float64))
    shifted = np.concatenate(
        [points]
        + [points + eps * _AXES[a] for a in range(3)]
        + [points - eps * _AXES[a] for a in range(3)]
    )
    s = eval_sdf_only(params, shifted).reshape(7, len(points))
    lap = ((s[1:4] + s[4:7]).sum(axis=0) - 6.0 * s[0]) / (eps * eps)
    return lap[0] if np.asarray(x).ndim == 1 else lap


def numerical_derivative_tensors(
    params: FieldParameters,
    x: np.ndarray,
    eps: float,
    center_s: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """Graph-recording (gradient [3, N], Laplacian [N]) from six batched offsets.

    `center_s` reuses an already computed s(x) for the Laplacian.
    """
    points = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = len(points)
    shifted = np.concatenate([points + eps * _AXES[a] for a in range(3)] + [points - eps * _AXES[a] for a in range(3)])
    s_shift, _ = sdf_tensors(params, shifted)
    if center_s is None:
        center_s, _ = sdf_tensors(params, points)
    plus = s_shift[: 3 * n].reshape(3, n)
    minus = s_shift[3 * n:].reshape(3, n)
    gradient = (plus - minus) * (1.0 / (2.0 * eps))
    laplacian = ((plus + minus).sum(axis=0) - center_s * 6.0) * (1.0 / (eps * eps))
    return gradient, laplacian


# ---- checkpoints ----

_MAGIC = b"M2MAPCKP"
_VERSION = 1


def config_fingerprint(config: FieldConfig, domain: FieldDomain) -> str:
    payload = json.dumps({"config": asdict(config), "domain": asdict(domain)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_checkpoint(
    path: Union[str, Path],
    params: FieldParameters,
    optimizer_state=None,
) -> None:
    """Versioned header + config JSON + flat parameter arrays (+ Adam moments)."""
    named = params.named_parameters()
    arrays: List[Tuple[str, np.ndarray]] = [(name, t.data) for name, t in named.items()]
    step = 0
    if optimizer_state is not None:
        step = optimizer_state.step
        for name in named:
            if name in optimizer_state.first_moment:
                arrays.append((f"adam.m.{name}", optimizer_state.first_moment[name]))
                arrays.append((f"adam.v.{name}", optimizer_state.second_moment[name]))
    meta = {
        "config": asdict(params.config),
        "domain": asdict(params.domain),
        "fingerprint": config_fingerprint(params.config, params.domain),
        "sphere_blend": params.sphere_blend,
        "adam_step": step,
        "has_optimizer": optimizer_state is not None,
        "arrays": [{"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in arrays],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with atomic_write(path) as handle:
        handle.write(_MAGIC)
        handle.write(np.array([_VERSION, len(meta_bytes)], dtype="<u4").tobytes())
        handle.write(hashlib.sha256(meta_bytes).digest())
        handle.write(meta_bytes)
        for _, array in arrays:
            handle.write(np.ascontiguousarray(array).tobytes())
    logging.info("Saved checkpoint %s (%d arrays)", path, len(arrays))


def _config_from_dict(raw: dict) -> FieldConfig:
    raw = dict(raw)
    raw["encoding"] = HashEncodingConfig(**raw["encoding"])
    return FieldConfig(**raw)


def load_checkpoint(path: Union[str, Path], expected: Optional[FieldConfig] = None):
    """Read a checkpoint written by save_checkpoint.

    Returns:
        (FieldParameters, AdamState or None)

    Raises:
        CheckpointError: unreadable file, corrupted header, or a config that
            differs from `expected` when one is given.
    """
    from app.optimizer import AdamState

    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, meta_len = np.frombuffer(raw[8:16], dtype="<u4")
    if int(version) != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {int(version)}")
    digest = raw[16:48]
    meta_bytes = raw[48:48 + int(meta_len)]
    if hashlib.sha256(meta_bytes).digest() != digest:
        raise CheckpointError(f"{path}: header hash mismatch (file corrupted)")
    meta = json.loads(meta_bytes)
    config = _config_from_dict(meta["config"])
    domain = FieldDomain(tuple(meta["domain"]["center"]), meta["domain"]["map_radius"], meta["domain"]["boundary"])
    if config_fingerprint(config, domain) != meta["fingerprint"]:
        raise CheckpointError(f"{path}: config fingerprint mismatch")
    if expected is not None and config_fingerprint(expected, domain) != meta["fingerprint"]:
        raise CheckpointError(f"{path}: checkpoint was trained with a different field configuration")

    arrays: Dict[str, np.ndarray] = {}
    offset = 48 + int(meta_len)
    for entry in meta["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"]))
        end = offset + count * dtype.itemsize
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype=dtype).reshape(entry["shape"]).copy()
        offset = end

    params = init_field(config, domain, seed=0)
    for name, tensor in params.named_parameters().items():
        if name not in arrays or arrays[name].shape != tensor.shape:
            raise CheckpointError(f"{path}: parameter {name} missing or mis-shaped")
        tensor.data = arrays[name]
    params.sphere_blend = float(meta["sphere_blend"])

    state = None
    if meta["has_optimizer"]:
        state = AdamState(step=int(meta["adam_step"]))
        for name in params.named_parameters():
            if f"adam.m.{name}" in arrays:
                state.first_moment[name] = arrays[f"adam.m.{name}"]
                state.second_moment[name] = arrays[f"adam.v.{name}"]
    return params, state


def with_fixed_beta(params: FieldParameters, fixed_beta: Optional[float]) -> FieldParameters:
    """Same tensors, config switched to (or away from) a constant scale."""
    params.config = replace(params.config, fixed_beta=fixed_beta)
    return params
