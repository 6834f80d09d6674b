"""Frozen ViT-style image encoder with five feature taps.

A scaled-down stand-in for a pretrained segmentation image encoder: patch
embedding, pre-norm transformer blocks with global multi-head attention, and
a 1x1 conv + BN neck.  Weights come from a seeded generator (or a checkpoint
file) and never change after construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TAP_NAMES, EncoderConfig
from .digest import module_digest
from .errors import RejectedInputError
from .nn import functional as F
from .nn.module import Buffer, Module, ModuleList, Parameter

LN_EPS = 1e-6


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall inside two standard deviations."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return (x * std).astype(np.float32)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


def _frozen(a: np.ndarray) -> Parameter:
    return Parameter(a, trainable=False)


@dataclass(frozen=True)
class EncoderTapSet:
    pe: np.ndarray
    t_first: np.ndarray
    t_mid: np.ndarray
    t_last: np.ndarray
    neck: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in TAP_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def as_tuple(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, n) for n in TAP_NAMES)


class TransformerBlock(Module):
    """Pre-norm block: ``x + MHSA(LN(x))`` followed by ``x + MLP(LN(x))``."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, rng: np.random.Generator):
        hidden = int(dim * mlp_ratio)
        self.num_heads = num_heads
        self.ln1_gamma = _frozen(np.ones(dim, np.float32))
        self.ln1_beta = _frozen(np.zeros(dim, np.float32))
        self.qkv_weight = _frozen(trunc_normal(rng, (3 * dim, dim)))
        self.qkv_bias = _frozen(np.zeros(3 * dim, np.float32))
        self.proj_weight = _frozen(trunc_normal(rng, (dim, dim)))
        self.proj_bias = _frozen(np.zeros(dim, np.float32))
        self.ln2_gamma = _frozen(np.ones(dim, np.float32))
        self.ln2_beta = _frozen(np.zeros(dim, np.float32))
        self.fc1_weight = _frozen(trunc_normal(rng, (hidden, dim)))
        self.fc1_bias = _frozen(np.zeros(hidden, np.float32))
        self.fc2_weight = _frozen(trunc_normal(rng, (dim, hidden)))
        self.fc2_bias = _frozen(np.zeros(dim, np.float32))

    def attention(self, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Global multi-head self-attention on ``[N, T, D]`` tokens; returns (output, probabilities)."""
        n, t, d = tokens.shape
        h = self.num_heads
        hd = d // h
        qkv = tokens @ self.qkv_weight.data.T + self.qkv_bias.data
        qkv = qkv.reshape(n, t, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(hd)
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        out = (probs @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return out @ self.proj_weight.data.T + self.proj_bias.data, probs

    def forward_tokens(self, x: np.ndarray, return_attn: bool = False):
        attn_out, probs = self.attention(layer_norm(x, self.ln1_gamma.data, self.ln1_beta.data))
        x = x + attn_out
        y = layer_norm(x, self.ln2_gamma.data, self.ln2_beta.data)
        y = gelu(y @ self.fc1_weight.data.T + self.fc1_bias.data)
        x = x + (y @ self.fc2_weight.data.T + self.fc2_bias.data)
        return (x, probs) if return_attn else x

    def forward(self, fmap: np.ndarray) -> np.ndarray:
        """Feature-map interface: ``[N, D, G, G]`` in and out."""
        n, d, g, g2 = fmap.shape
        if d % self.num_heads:
            raise RejectedInputError(f"{d} channels not divisible by {self.num_heads} heads")
        tokens = fmap.reshape(n, d, g * g2).transpose(0, 2, 1)
        out = self.forward_tokens(tokens)
        return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(n, d, g, g2))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, p, g = cfg.embed_dim, cfg.patch_size, cfg.grid
        self.patch_weight = _frozen(trunc_normal(rng, (d, 3, p, p)))
        self.patch_bias = _frozen(np.zeros(d, np.float32))
        self.pos_embed = _frozen(trunc_normal(rng, (1, d, g, g)))
        self.blocks = ModuleList(TransformerBlock(d, cfg.num_heads, cfg.mlp_ratio, rng)
                                 for _ in range(cfg.num_blocks))
        dn = cfg.neck_channels
        self.neck_weight = _frozen(trunc_normal(rng, (dn, d, 1, 1)))
        self.neck_gamma = _frozen(np.ones(dn, np.float32))
        self.neck_beta = _frozen(np.zeros(dn, np.float32))
        self.neck_running_mean = Buffer(np.zeros(dn, np.float32))
        self.neck_running_var = Buffer(np.ones(dn, np.float32))
        self.freeze()
        self.digest = self.compute_digest()

    def compute_digest(self) -> int:
        return module_digest(self)

    def load_state_dict(self, state, strict: bool = True) -> None:
        super().load_state_dict(state, strict)
        self.freeze()
        self.digest = self.compute_digest()

    def patch_embed(self, img: np.ndarray) -> np.ndarray:
        s = self.cfg.input_size
        if img.ndim != 4 or img.shape[1:] != (3, s, s):
            raise RejectedInputError(f"encoder expects [N, 3, {s}, {s}] images, got {img.shape}")
        x = F.conv2d(img.astype(self.patch_weight.data.dtype, copy=False), self.patch_weight.data,
                     self.patch_bias.data, stride=self.cfg.patch_size)
        return x + self.pos_embed.data

    def neck(self, x: np.ndarray) -> np.ndarray:
        y = F.conv2d(x, self.neck_weight.data)
        y, _ = F.batchnorm_forward(y, self.neck_gamma.data, self.neck_beta.data,
                                   self.neck_running_mean.data, self.neck_running_var.data,
                                   training=False)
        return y

    def encode_with_taps(self, img: np.ndarray) -> EncoderTapSet:
        """Run the frozen encoder, returning the patch-embedding, block and neck taps."""
        pe = self.patch_embed(img)
        n, d, g, _ = pe.shape
        first, mid, last = self.cfg.tap_blocks
        keep = {}
        tokens = pe.reshape(n, d, g * g).transpose(0, 2, 1)
        for i, block in enumerate(self.blocks, start=1):
            tokens = block.forward_tokens(tokens)
            if i in (first, mid, last):
                keep[i] = np.ascontiguousarray(tokens.transpose(0, 2, 1).reshape(n, d, g, g))
        return EncoderTapSet(pe=pe, t_first=keep[first], t_mid=keep[mid], t_last=keep[last],
                             neck=self.neck(keep[last]))


def build_encoder(cfg: EncoderConfig) -> Encoder:
    return Encoder(cfg)
