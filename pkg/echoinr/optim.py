"""
Adam optimizer over numpy parameter arrays
"""

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from echoinr.tensorgraph import Tensor


@dataclass
class AdamState:
    """First/second moment estimates and the timestep"""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[List[np.ndarray], AdamState]:
    """
    One bias-corrected Adam update

    Args:
        params: Current parameter arrays
        grads: Gradients with matching shapes
        state: Moments from the previous step (zeros at step 0)
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator floor

    Returns:
        (new parameter arrays, new state); inputs are not modified
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t

    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"Gradient shape {g.shape} does not match parameter {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_params.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(m=new_m, v=new_v, step=t)


@dataclass
class Adam:
    """Adam bound to a list of tensors; missing gradients count as zero"""

    params: List[Tensor]
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros_like([p.value for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        values = [p.value for p in self.params]
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        updated, self.state = adam_step(
            values, grads, self.state, self.lr, self.beta1, self.beta2, self.eps
        )
        for p, value in zip(self.params, updated):
            p.value = value
