from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from app.autodiff import Tensor, as_tensor
from app.density import occupancy_tensor


EPS_LOG = 1e-6
RGB_WEIGHT_START = 1e-4
RGB_WEIGHT_END = 10.0
LAMBDA_EIK = 0.1
LAMBDA_CURV = 5e-4


def sdf_loss(
    s_pred: Tensor,
    beta_pred: Tensor,
    targets: np.ndarray,
    detach_target_beta: bool = False,
    eps_log: float = EPS_LOG,
) -> Tensor:
    """
    Binary cross-entropy between occupancies of predicted and target signed distances.

    Both occupancies use the predicted scale: o = Phi(-s, beta), o_hat = Phi(-s_hat, beta),
    clamped to [eps_log, 1 - eps_log].

    Args:
        s_pred: predicted signed distances [N]
        beta_pred: predicted scales [N]
        targets: along-ray signed distance targets [N]
        detach_target_beta: stop gradients flowing through the scale inside the target

    Returns:
        Scalar tensor, the mean BCE over samples
    """
    target_beta = beta_pred.detach() if detach_target_beta else beta_pred
    target_s = Tensor(np.asarray(targets, dtype=s_pred.dtype))
    o = occupancy_tensor(target_s, target_beta).clip(eps_log, 1.0 - eps_log)
    o_hat = occupancy_tensor(s_pred, beta_pred).clip(eps_log, 1.0 - eps_log)
    bce = o * o_hat.log() + (1.0 - o) * (1.0 - o_hat).log()
    return -bce.mean()


def rgb_loss(rendered: Tensor, source: np.ndarray) -> Tensor:
    """Mean over pixels of the squared colour error ||C - C_hat||^2."""
    rendered = as_tensor(rendered)
    diff = rendered - np.asarray(source, dtype=rendered.dtype)
    return (diff * diff).sum(axis=-1).mean()


def eikonal_loss(gradients) -> Tensor:
    """Mean of (||grad s|| - 1)^2; `gradients` is [3, N] as produced by numerical_derivative_tensors."""
    gradients = as_tensor(gradients)
    norm = ((gradients * gradients).sum(axis=0) + 1e-12).sqrt()
    return ((norm - 1.0) ** 2).mean()


def curvature_loss(curvatures) -> Tensor:
    """Mean absolute Laplacian."""
    return as_tensor(curvatures).abs().mean()


def rgb_weight(iteration: int, iterations: int, start: float = RGB_WEIGHT_START, end: float = RGB_WEIGHT_END) -> float:
    """Linear ramp of the photometric weight from `start` at iteration 0 to `end` at the last iteration."""
    if iterations <= 1:
        return end
    fraction = min(max(iteration, 0), iterations - 1) / (iterations - 1)
    return (1.0 - fraction) * start + fraction * end


@dataclass(frozen=True)
class LossComponents:
    sdf: Tensor
    rgb: Optional[Tensor] = None
    eikonal: Optional[Tensor] = None
    curvature: Optional[Tensor] = None

    def values(self) -> Dict[str, float]:
        out = {"sdf": self.sdf.item()}
        for name in ("rgb", "eikonal", "curvature"):
            term = getattr(self, name)
            out[name] = float("nan") if term is None else term.item()
        return out


def total_loss(
    iteration: int,
    iterations: int,
    components: LossComponents,
    lambda_eik: float = LAMBDA_EIK,
    lambda_curv: float = LAMBDA_CURV,
    lambda_rgb: Optional[float] = None,
) -> Tensor:
    """
    L = L_sdf + lambda_rgb(it) L_rgb + lambda_eik L_eik + lambda_curv L_curv.

    Missing components contribute nothing. `lambda_rgb` overrides the ramp.
    """
    weight_rgb = rgb_weight(iteration, iterations) if lambda_rgb is None else lambda_rgb
    loss = components.sdf
    if components.rgb is not None:
        loss = loss + components.rgb * weight_rgb
    if components.eikonal is not None:
        loss = loss + components.eikonal * lambda_eik
    if components.curvature is not None:
        loss = loss + components.curvature * lambda_curv
    return loss
