"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .module import Parameter


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
               lr: float, wd: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, t: int | None = None) -> None:
    """Update ``params`` in place.

    The decay ``p -= lr * wd * p`` is applied before, and separately from, the
    bias-corrected moment update.  ``t`` defaults to ``state.t + 1``.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t = state.t + 1 if t is None else t
    if state.t < 1:
        raise ValueError("step index must be >= 1")
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"param {p.shape} and grad {g.shape} disagree")
        if wd:
            p *= 1.0 - lr * wd
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


class AdamW:
    def __init__(self, params: list[Parameter], lr: float = 1e-4, weight_decay: float = 0.005,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                   self.lr, self.weight_decay, *self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0
