"""Backbone, projector head and assembly of the fusion model variants."""
from __future__ import annotations

import numpy as np

from .attention import AddFusion, DirectAddAdapter, GatedFusion, SigmoidAttention, SlcaBlock
from .config import BackboneConfig, ModelSpec
from .digest import module_digest
from .encoder import Encoder, EncoderTapSet, build_encoder
from .errors import RejectedInputError
from .nn import functional as F
from .nn.module import ConvBlock, ConvSpec, Linear, Module, ModuleList, Sequential


def _stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose])


class Backbone(Module):
    """Plain CNN: a stride-2 stem and four stages, each opening with a stride-2 block."""

    def __init__(self, cfg: BackboneConfig, seed: int):
        self.cfg = cfg
        rng = _stream(seed, 1)
        self.stem = Sequential([ConvBlock(ConvSpec(3, cfg.stem_channels, 3, stride=2, padding=1), rng)])
        self.stages = ModuleList()
        c_in = cfg.stem_channels
        for c in cfg.stage_channels:
            blocks = [ConvBlock(ConvSpec(c_in, c, 3, stride=2, padding=1), rng)]
            blocks += [ConvBlock(ConvSpec(c, c, 3, stride=1, padding=1), rng)
                       for _ in range(cfg.blocks_per_stage - 1)]
            self.stages.append(Sequential(blocks))
            c_in = c
        # images are constants; no gradient needed below the stem
        self.stem[0].need_input_grad = False

    @property
    def units(self) -> list[Sequential]:
        """Stem followed by the stages; one fusion point after each."""
        return [self.stem, *self.stages]


def build_backbone(cfg: BackboneConfig, seed: int) -> Backbone:
    return Backbone(cfg, seed)


def backbone_param_count(cfg: BackboneConfig) -> int:
    def block(c_in, c_out):
        return c_in * c_out * 9 + 2 * c_out

    total = block(3, cfg.stem_channels)
    c_in = cfg.stem_channels
    for c in cfg.stage_channels:
        total += block(c_in, c) + (cfg.blocks_per_stage - 1) * block(c, c)
        c_in = c
    return total


class ProjectorHead(Module):
    """Resize to 8*S_f, lift channels with a 3x3 block, then halve three times to S_f."""

    def __init__(self, c_in: int, c_out: int, final_size: int, rng: np.random.Generator):
        self.final_size = final_size
        self.resize_target = 8 * final_size
        self.lift = ConvBlock(ConvSpec(c_in, c_out, 3, stride=1, padding=1), rng)
        self.down = Sequential([ConvBlock(ConvSpec(c_out, c_out, 3, stride=2, padding=1), rng)
                                for _ in range(3)])
        self._cache = None

    def forward(self, fmap: np.ndarray, training: bool = False) -> np.ndarray:
        x, cache = F.resize_bilinear_forward(fmap, self.resize_target, self.resize_target)
        if training:
            self._cache = cache
        return self.down.forward(self.lift.forward(x, training), training)

    def backward(self, dout: np.ndarray) -> np.ndarray | None:
        d = self.lift.backward(self.down.backward(dout))
        return None if d is None else F.resize_bilinear_backward(d, self._cache)

    def detach_input(self) -> None:
        self.lift.need_input_grad = False


def projector_head(neck_tap: np.ndarray, params: ProjectorHead, final_size: int,
                   training: bool = False) -> np.ndarray:
    if params.final_size != final_size:
        raise RejectedInputError(f"projector built for S_f={params.final_size}, asked for {final_size}")
    return params.forward(neck_tap, training)


class FusionModel(Module):
    """Frozen encoder branch + CNN branch joined at five fusion points."""

    def __init__(self, spec: ModelSpec, encoder: Encoder | None = None):
        self.spec = spec
        self.encoder = encoder if encoder is not None else build_encoder(spec.encoder)
        if self.encoder.cfg != spec.encoder:
            raise RejectedInputError("supplied encoder does not match spec.encoder")
        self.backbone = build_backbone(spec.backbone, spec.seed)
        bb = spec.backbone
        enc = spec.encoder
        tap_channels = {"pe": enc.embed_dim, "t_first": enc.embed_dim, "t_mid": enc.embed_dim,
                        "t_last": enc.embed_dim, "neck": enc.neck_channels}
        if spec.slca.g > enc.grid:
            raise RejectedInputError(f"pooling grid {spec.slca.g} exceeds the {enc.grid}x{enc.grid} tap grid")
        rng = _stream(spec.seed, 2)
        self.fusions = ModuleList()
        if spec.variant != "baseline":
            for tap, c_s in zip(spec.tap_assignment, bb.injection_channels):
                c_in = tap_channels[tap]
                if spec.variant == "add_no_attention":
                    self.fusions.append(AddFusion(DirectAddAdapter(c_in, c_s, rng)))
                elif spec.variant == "sigmoid_only":
                    self.fusions.append(GatedFusion(SigmoidAttention(c_in, c_s, spec.slca.g, rng)))
                else:
                    cfg = spec.slca.model_copy(update={"out_channels": c_s})
                    self.fusions.append(GatedFusion(SlcaBlock(c_in, cfg, rng)))
        c_last = bb.stage_channels[-1]
        self.final_size = bb.final_size
        self.projector = None
        if spec.variant == "slca_projector":
            self.projector = ProjectorHead(enc.neck_channels, c_last, self.final_size, _stream(spec.seed, 3))
        for fusion in self.fusions:
            (fusion.attention if isinstance(fusion, GatedFusion) else fusion.adapter).detach_input()
        if self.projector is not None:
            self.projector.detach_input()
        self.classifier = Linear(c_last * (2 if self.projector else 1), bb.num_classes, _stream(spec.seed, 4))
        self._cache = None

    @property
    def uses_encoder(self) -> bool:
        return self.spec.variant != "baseline"

    def encode(self, images: np.ndarray) -> EncoderTapSet | None:
        return self.encoder.encode_with_taps(images) if self.uses_encoder else None

    def forward(self, images: np.ndarray, taps: EncoderTapSet | None = None,
                training: bool = False) -> np.ndarray:
        s = self.spec.backbone.input_size
        if images.ndim != 4 or images.shape[1:] != (3, s, s):
            raise RejectedInputError(f"expected images [N, 3, {s}, {s}], got {images.shape}")
        if taps is None and self.uses_encoder:
            taps = self.encode(images)
        x = images
        for i, unit in enumerate(self.backbone.units):
            x = unit.forward(x, training)
            if self.uses_encoder:
                x = self.fusions[i].forward(x, taps[self.spec.tap_assignment[i]], training)
        c_last = x.shape[1]
        if self.projector is not None:
            x = np.concatenate([x, self.projector.forward(taps.neck, training)], axis=1)
        pooled = F.global_avg_pool(x)
        if training:
            self._cache = (x.shape, c_last)
        return self.classifier.forward(pooled, training)

    def backward(self, dlogits: np.ndarray) -> None:
        shape, c_last = self._cache
        dx = F.global_avg_pool_backward(self.classifier.backward(dlogits), shape)
        if self.projector is not None:
            self.projector.backward(dx[:, c_last:])
            dx = dx[:, :c_last]
        for i in reversed(range(len(self.backbone.units))):
            if self.uses_encoder:
                dx = self.fusions[i].backward(dx)
            dx = self.backbone.units[i].backward(dx)

    def attention_maps(self, taps: EncoderTapSet) -> list[np.ndarray]:
        """Per-fusion-point attention grids (gated variants only)."""
        maps = []
        for fusion, tap in zip(self.fusions, self.spec.tap_assignment):
            if not isinstance(fusion, GatedFusion):
                raise RejectedInputError(f"variant {self.spec.variant} has no attention maps")
            maps.append(fusion.attention_map(taps[tap], training=False))
        return maps

    def encoder_digest(self) -> int:
        return self.encoder.compute_digest()

    def trainable_digest(self) -> int:
        return module_digest(self, trainable=True)

    def backbone_digest(self) -> int:
        return module_digest(self.backbone)


def assemble_model(spec: ModelSpec, encoder: Encoder | None = None) -> FusionModel:
    return FusionModel(spec, encoder)


def forward_classify(model: FusionModel, images: np.ndarray, training: bool = False) -> np.ndarray:
    return model.forward(images, None, training)
