from __future__ import annotations

from typing import Union

import numpy as np
from scipy.special import expit

from app.autodiff import Tensor


Scalar = Union[float, np.ndarray]


def sigmoid(v: Scalar, h: Scalar) -> Scalar:
    """Logistic occupancy Phi(v, h) = 1 / (1 + exp(-v / h))."""
    h_arr = np.asarray(h, dtype=np.float64)
    if np.any(h_arr <= 0):
        raise ValueError(f"sigmoid scale h must be positive, got min {float(h_arr.min())}")
    out = expit(np.asarray(v, dtype=np.float64) / h_arr)
    return float(out) if np.ndim(out) == 0 else out


def sdf_to_density(s: Scalar, beta: Scalar, slope: Scalar) -> Scalar:
    """sigma = max(-Phi(-s, beta) / beta * M, 0); zero wherever the slope M >= 0."""
    occupancy = sigmoid(-np.asarray(s, dtype=np.float64), beta)
    sigma = np.maximum(-occupancy / np.asarray(beta, dtype=np.float64) * np.asarray(slope, dtype=np.float64), 0.0)
    return float(sigma) if np.ndim(sigma) == 0 else sigma


def occupancy_tensor(s: Tensor, beta: Tensor) -> Tensor:
    """Phi(-s, beta) on graph tensors."""
    return ((-s) / beta).sigmoid()


def density_tensor(s: Tensor, beta: Tensor, slope: np.ndarray) -> Tensor:
    """Graph version of sdf_to_density; the slope comes from the sampler and is a constant."""
    slope = np.asarray(slope, dtype=s.dtype)
    return (occupancy_tensor(s, beta) / beta * (-slope)).relu()
