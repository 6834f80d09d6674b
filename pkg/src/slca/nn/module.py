"""A minimal layer system: parameters, buffers, and modules with explicit backward passes.

Each layer keeps the cache of its last training-mode forward call, so one
module instance serves one forward/backward pair at a time.  Eval-mode
forwards write no state and are safe to run concurrently.
"""
from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from ..errors import RejectedInputError
from . import functional as F


class Parameter:
    __slots__ = ("data", "grad", "trainable")

    def __init__(self, data: np.ndarray, trainable: bool = True):
        self.data = data
        self.grad = np.zeros_like(data)
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype}, trainable={self.trainable})"


class Buffer:
    """Non-trainable state saved with the model (BN running statistics, positional tables)."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        self.data = data


class Module:
    def _members(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Buffer, Module)):
                yield name, value

    def _named(self, kind, prefix: str = "") -> Iterator[tuple[str, object]]:
        for name, value in self._members():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value._named(kind, full + ".")
            elif isinstance(value, kind):
                yield full, value

    def named_parameters(self, prefix: str = "", trainable_only: bool = False):
        for name, p in self._named(Parameter, prefix):
            if p.trainable or not trainable_only:
                yield name, p

    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        return [p for _, p in self.named_parameters(trainable_only=trainable_only)]

    def named_buffers(self, prefix: str = ""):
        yield from self._named(Buffer, prefix)

    def named_tensors(self, prefix: str = ""):
        """Parameters and buffers, in traversal order."""
        yield from self._named((Parameter, Buffer), prefix)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_tensors())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != t.data.shape:
                raise ValueError(f"{name}: shape {value.shape} != {t.data.shape}")
            t.data = value.astype(t.data.dtype, copy=True)
            if isinstance(t, Parameter):
                t.grad = np.zeros_like(t.data)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = False
        return self

    def astype(self, dtype) -> "Module":
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
            if isinstance(t, Parameter):
                t.grad = np.zeros_like(t.data)
        return self

    def num_parameters(self, trainable_only: bool = True) -> int:
        return int(sum(p.data.size for p in self.parameters(trainable_only)))


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1
    padding: int = 0
    bn: bool = True
    relu: bool = True
    # a bias ahead of BN is cancelled by the mean subtraction
    bias: bool | None = None

    def __post_init__(self):
        if self.k not in (1, 3):
            raise RejectedInputError(f"conv blocks use 1x1 or 3x3 kernels, got {self.k}")
        if self.c_in < 1 or self.c_out < 1 or self.stride < 1 or self.padding < 0:
            raise RejectedInputError(f"invalid conv block {self}")

    @property
    def has_bias(self) -> bool:
        return (not self.bn) if self.bias is None else self.bias


class ConvBlock(Module):
    """Convolution, optionally followed by batch norm and then ReLU.

    Set ``need_input_grad = False`` when the block reads a constant input;
    ``backward`` then only accumulates parameter gradients and returns None.
    """

    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        self.spec = spec
        fan_in = spec.c_in * spec.k * spec.k
        self.weight = Parameter(kaiming_normal(rng, (spec.c_out, spec.c_in, spec.k, spec.k), fan_in))
        if spec.has_bias:
            self.bias = Parameter(np.zeros(spec.c_out, dtype=np.float32))
        if spec.bn:
            self.bn_gamma = Parameter(np.ones(spec.c_out, dtype=np.float32))
            self.bn_beta = Parameter(np.zeros(spec.c_out, dtype=np.float32))
            self.bn_running_mean = Buffer(np.zeros(spec.c_out, dtype=np.float32))
            self.bn_running_var = Buffer(np.ones(spec.c_out, dtype=np.float32))
        self.need_input_grad = True
        self._cache = None

    @property
    def stride(self) -> int:
        return self.spec.stride

    @property
    def padding(self) -> int:
        return self.spec.padding

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        bias = self.bias.data if self.spec.has_bias else None
        y, conv_cache = F.conv2d_forward(x, self.weight.data, bias, self.spec.stride, self.spec.padding)
        bn_cache = None
        if self.spec.bn:
            y, bn_cache = F.batchnorm_forward(
                y, self.bn_gamma.data, self.bn_beta.data,
                self.bn_running_mean.data, self.bn_running_var.data, training)
        if self.spec.relu:
            y = F.relu(y)
        if training:
            self._cache = (conv_cache, bn_cache, y)
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        conv_cache, bn_cache, y = self._cache
        if self.spec.relu:
            dout = F.relu_backward(dout, y)
        if self.spec.bn:
            dout, dgamma, dbeta = F.batchnorm_backward(dout, bn_cache)
            self.bn_gamma.grad += dgamma
            self.bn_beta.grad += dbeta
        dx, dw, db = F.conv2d_backward(dout, conv_cache, self.need_input_grad)
        self.weight.grad += dw
        if db is not None:
            self.bias.grad += db
        return dx

    def output_size(self, size: int) -> int:
        return F.conv_out_size(size, self.spec.k, self.spec.stride, self.spec.padding)


class Sequential(ModuleList):
    def forward(self, x, training: bool = False):
        for m in self:
            x = m.forward(x, training)
        return x

    def backward(self, dout):
        for m in reversed(self._items):
            dout = m.backward(dout)
        return dout


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_out, d_in)).astype(np.float32))
        self.bias = Parameter(rng.uniform(-bound, bound, d_out).astype(np.float32))
        self._x = None

    def forward(self, x, training: bool = False):
        if training:
            self._x = x
        return F.linear(x, self.weight.data, self.bias.data)

    def backward(self, dout):
        dx, dw, db = F.linear_backward(dout, self._x, self.weight.data)
        self.weight.grad += dw
        self.bias.grad += db
        return dx
