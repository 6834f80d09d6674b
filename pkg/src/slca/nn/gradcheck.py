"""Central finite-difference verification of analytic backward passes."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import NumericError
from .module import Module

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class GradReport:
    per_param: dict[str, float] = field(default_factory=dict)
    max_rel_error: float = 0.0
    checked: int = 0
    entries: int = 0

    def passed(self, threshold: float) -> bool:
        return self.max_rel_error < threshold

    def to_dict(self) -> dict:
        return {
            "per_param_max_rel_error": self.per_param,
            "max_rel_error": self.max_rel_error,
            "parameters_checked": self.checked,
            "entries_checked": self.entries,
        }


def projection_loss(seed: int = 0) -> LossFn:
    """Scalar loss ``sum(out * R)`` with a fixed random ``R`` scaled to keep the loss O(1)."""
    cache: dict[tuple, np.ndarray] = {}

    def loss(out: np.ndarray) -> tuple[float, np.ndarray]:
        if out.shape not in cache:
            r = np.random.default_rng(seed).standard_normal(out.shape)
            cache[out.shape] = r / np.sqrt(r.size)
        r = cache[out.shape].astype(out.dtype)
        return float((out * r).sum()), r

    return loss


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _cast(x):
    if isinstance(x, np.ndarray) and x.dtype.kind == "f":
        return x.astype(np.float64)
    if dataclasses.is_dataclass(x) and not isinstance(x, type):
        return dataclasses.replace(x, **{f.name: _cast(getattr(x, f.name)) for f in dataclasses.fields(x)})
    if isinstance(x, (list, tuple)):
        return type(x)(_cast(v) for v in x)
    if isinstance(x, dict):
        return {k: _cast(v) for k, v in x.items()}
    return x


def grad_check(module: Module, inputs: tuple, loss_fn: LossFn | None = None, *,
               eps: float = 1e-6, samples: int = 50, seed: int = 0,
               corrupt: bool = False) -> GradReport:
    """Compare ``module.backward`` against central differences in float64.

    ``module`` must provide ``forward(*inputs, training=True)`` and
    ``backward(dout)``.  Only trainable parameters are checked; tensors with
    more than ``samples`` entries are checked on a seeded random subset.  The
    module passed in is not modified.  ``corrupt`` perturbs the analytic
    gradients and exists for negative-control tests.
    """
    m = copy.deepcopy(module).astype(np.float64)
    inputs = _cast(tuple(inputs))
    loss_fn = loss_fn or projection_loss(seed)
    buffers = {name: b.data.copy() for name, b in m.named_buffers()}

    def evaluate(with_grad: bool) -> float:
        for name, b in m.named_buffers():
            b.data[...] = buffers[name]
        out = m.forward(*inputs, training=True)
        loss, dout = loss_fn(out)
        if not np.isfinite(loss):
            raise NumericError("gradient check loss is not finite")
        if with_grad:
            m.backward(dout)
        return loss

    m.zero_grad()
    evaluate(True)
    rng = np.random.default_rng(seed)
    report = GradReport()
    for name, p in m.named_parameters(trainable_only=True):
        analytic = p.grad.copy()
        if corrupt:
            analytic = analytic * 1.5 + 1e-3
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= samples else rng.choice(flat.size, samples, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            plus = evaluate(False)
            flat[i] = orig - eps
            minus = evaluate(False)
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, rel_error(float(analytic.reshape(-1)[i]), numeric))
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        report.checked += 1
        report.entries += len(idx)
    return report
