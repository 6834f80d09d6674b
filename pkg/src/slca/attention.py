"""Spatially localized channel attention and the fusion rules built on it.

``SLCA(F) = sigmoid(Conv2(ReLU(Conv1(SLAP(F)))))``: local average pooling onto
a g x g grid, a 1x1 channel bottleneck (reduce by r, expand to the target
stage width) and a sigmoid.  The attention gates a backbone stage through a
residual: ``stage + stage * up(A)``.
"""
from __future__ import annotations

import numpy as np

from .config import SlcaConfig
from .errors import RejectedInputError
from .nn import functional as F
from .nn.module import ConvBlock, ConvSpec, Module


class SlcaBlock(Module):
    def __init__(self, c_in: int, cfg: SlcaConfig, rng: np.random.Generator):
        if cfg.out_channels is None:
            raise RejectedInputError("SlcaConfig.out_channels must be set for a fusion point")
        self.cfg = cfg
        hidden = cfg.hidden(c_in)
        self.conv1 = ConvBlock(ConvSpec(c_in, hidden, k=1, bn=True, relu=True), rng)
        self.conv2 = ConvBlock(ConvSpec(hidden, cfg.out_channels, k=1, bn=True, relu=False), rng)
        self._cache = None

    @property
    def g(self) -> int:
        return self.cfg.g

    def forward(self, fmap: np.ndarray, training: bool = False) -> np.ndarray:
        g = min(self.cfg.g, fmap.shape[2], fmap.shape[3])
        pooled, pool_cache = F.slap_forward(fmap, g)
        a = F.sigmoid(self.conv2.forward(self.conv1.forward(pooled, training), training))
        if training:
            self._cache = (pool_cache, a)
        return a

    def backward(self, da: np.ndarray) -> np.ndarray:
        pool_cache, a = self._cache
        d = F.sigmoid_backward(da, a)
        d = self.conv1.backward(self.conv2.backward(d))
        return None if d is None else F.slap_backward(d, pool_cache)

    def detach_input(self) -> None:
        """Skip the input gradient (the tap is a frozen-encoder constant)."""
        self.conv1.need_input_grad = False


def slca_forward(fmap: np.ndarray, params: SlcaBlock, training: bool = False) -> np.ndarray:
    if params.cfg.g > min(fmap.shape[2:]):
        raise RejectedInputError(f"pooling grid {params.cfg.g} exceeds the {fmap.shape[2]}x{fmap.shape[3]} map")
    return params.forward(fmap, training)


def slca_param_count(c_in: int, r: int, c_out: int) -> int:
    """Trainable parameters of one SLCA block: two bias-free 1x1 convs plus BN affine terms."""
    hidden = max(1, c_in // r)
    return c_in * hidden + 2 * hidden + hidden * c_out + 2 * c_out


class SigmoidAttention(Module):
    """Ablation: one plain 1x1 conv and a sigmoid in place of the bottleneck."""

    def __init__(self, c_in: int, c_out: int, g: int, rng: np.random.Generator):
        self.g = g
        self.adapter = ConvBlock(ConvSpec(c_in, c_out, k=1, bn=False, relu=False), rng)
        self._cache = None

    def forward(self, fmap: np.ndarray, training: bool = False) -> np.ndarray:
        g = min(self.g, fmap.shape[2], fmap.shape[3])
        pooled, pool_cache = F.slap_forward(fmap, g)
        a = F.sigmoid(self.adapter.forward(pooled, training))
        if training:
            self._cache = (pool_cache, a)
        return a

    def backward(self, da: np.ndarray) -> np.ndarray:
        pool_cache, a = self._cache
        d = self.adapter.backward(F.sigmoid_backward(da, a))
        return None if d is None else F.slap_backward(d, pool_cache)

    def detach_input(self) -> None:
        self.adapter.need_input_grad = False


def sigmoid_only_attention(fmap: np.ndarray, adapter: SigmoidAttention, training: bool = False) -> np.ndarray:
    if adapter.g > min(fmap.shape[2:]):
        raise RejectedInputError(f"pooling grid {adapter.g} exceeds the {fmap.shape[2]}x{fmap.shape[3]} map")
    return adapter.forward(fmap, training)


def apply_attention_residual(stage: np.ndarray, attn: np.ndarray) -> np.ndarray:
    """``stage + stage * up(attn)`` with nearest-neighbour broadcast of the attention grid."""
    if attn.shape[:2] != stage.shape[:2]:
        raise RejectedInputError(
            f"attention {attn.shape[:2]} does not match stage (N, C) = {stage.shape[:2]}")
    up = F.upsample_nearest(attn, *stage.shape[2:])
    return stage + stage * up


class DirectAddAdapter(Module):
    """Ablation: project the tap to the stage width, resize, and add it to the stage."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.adapter = ConvBlock(ConvSpec(c_in, c_out, k=1, bn=False, relu=False), rng)
        self._cache = None

    def forward(self, fmap: np.ndarray, out_h: int, out_w: int, training: bool = False) -> np.ndarray:
        y, cache = F.resize_bilinear_forward(self.adapter.forward(fmap, training), out_h, out_w)
        if training:
            self._cache = cache
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return self.adapter.backward(F.resize_bilinear_backward(dout, self._cache))

    def detach_input(self) -> None:
        self.adapter.need_input_grad = False


def direct_add_adapter(fmap: np.ndarray, adapter: DirectAddAdapter, out_h: int, out_w: int,
                       training: bool = False) -> np.ndarray:
    if adapter.adapter.spec.c_in != fmap.shape[1]:
        raise RejectedInputError("adapter input channels do not match the tap")
    return adapter.forward(fmap, out_h, out_w, training)


class GatedFusion(Module):
    """Residual gating of a backbone stage by an attention module (SLCA or sigmoid-only).

    Setting ``override`` to a number replaces the attention map with that
    constant, bypassing the sigmoid; used to test the residual limits.
    """

    def __init__(self, attention: Module):
        self.attention = attention
        self.override: float | None = None
        self._cache = None

    def attention_map(self, tap: np.ndarray, training: bool = False) -> np.ndarray:
        return self.attention.forward(tap, training)

    def forward(self, stage: np.ndarray, tap: np.ndarray, training: bool = False) -> np.ndarray:
        if self.override is None:
            a = self.attention.forward(tap, training)
        else:
            g = min(self.attention.g, *tap.shape[2:])
            a = np.full((stage.shape[0], stage.shape[1], g, g), self.override, dtype=stage.dtype)
        if a.shape[1] != stage.shape[1]:
            raise RejectedInputError("attention channels do not match the stage")
        up, up_cache = F.upsample_nearest_forward(a, *stage.shape[2:])
        if training:
            self._cache = (stage, up, up_cache)
        return stage + stage * up

    def backward(self, dout: np.ndarray) -> np.ndarray:
        stage, up, up_cache = self._cache
        if self.override is None:
            self.attention.backward(F.upsample_nearest_backward(dout * stage, up_cache))
        return dout * (1 + up)


class AddFusion(Module):
    def __init__(self, adapter: DirectAddAdapter):
        self.adapter = adapter

    def forward(self, stage: np.ndarray, tap: np.ndarray, training: bool = False) -> np.ndarray:
        return stage + self.adapter.forward(tap, stage.shape[2], stage.shape[3], training)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.adapter.backward(dout)
        return dout
