from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from app.autodiff import Tensor


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"Adam lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


@dataclass
class AdamState:
    """Per-parameter first/second moments (float64) and the shared timestep."""

    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    lr: float,
    beta1: float,
    beta2: float,
    eps_adam: float,
    names: Optional[Iterable[str]] = None,
) -> Dict[str, Tensor]:
    """One bias-corrected Adam update, written into the parameter tensors.

    Args:
        state: moments and timestep; the timestep is incremented
        params: name -> trainable tensor
        grads: name -> gradient (missing names are treated as zero)
        names: restrict the update to these parameters (frozen ones keep
            their moments untouched)

    Returns:
        `params`, updated in place
    """
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    step_size = lr / bc1

    for name in (params if names is None else names):
        tensor = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros(tensor.shape)
        if g.shape != tensor.shape:
            raise ValueError(f"Gradient shape {g.shape} does not match parameter {name} {tensor.shape}")
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros(tensor.shape, dtype=np.float64)
            state.second_moment[name] = np.zeros(tensor.shape, dtype=np.float64)
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = step_size * m / (np.sqrt(v / bc2) + eps_adam)
        tensor.data = (tensor.data - update).astype(tensor.dtype, copy=False)
    return params


class Adam:
    """Thin stateful wrapper around adam_step for the training loop."""

    def __init__(self, config: AdamConfig, state: Optional[AdamState] = None):
        self.config = config
        self.state = state if state is not None else AdamState()

    def step(self, params: Dict[str, Tensor], names: Optional[Iterable[str]] = None) -> None:
        grads = {name: t.grad for name, t in params.items() if t.grad is not None}
        adam_step(
            self.state, params, grads,
            self.config.lr, self.config.beta1, self.config.beta2, self.config.eps,
            names=names,
        )
