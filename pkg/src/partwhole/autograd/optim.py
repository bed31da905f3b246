"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One in-place AdamW update of every array in ``params``.

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            v = state.exp_avg_sq[name] = np.zeros_like(p)
        if m.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"{name}: optimizer state shape {m.shape} != parameter shape {p.shape}")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v / bias2) + eps
        p -= (lr / bias1) * m / denom


class AdamW:
    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState()

    def step(self) -> None:
        arrays = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad.astype(p.dtype) for n, p in self.params.items() if p.grad is not None}
        adamw_step(arrays, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
