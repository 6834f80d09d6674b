"""Gradient-check targets: the SLCA block, the projector head and the full model."""
from __future__ import annotations

import numpy as np

from .attention import SlcaBlock
from .config import ModelSpec
from .data import generate, to_feature_map
from .model import ProjectorHead, assemble_model
from .nn.gradcheck import GradReport, grad_check

THRESHOLDS = {"slca": 1e-4, "projector": 1e-4, "full": 1e-3}
BLOCKS = tuple(THRESHOLDS)


def gradcheck_target(spec: ModelSpec, block: str, batch: int = 4):
    """Return ``(module, inputs)`` for one gradient-check target built from ``spec``."""
    enc, bb = spec.encoder, spec.backbone
    rng = np.random.default_rng([spec.seed, 99])
    if block == "slca":
        cfg = spec.slca.model_copy(update={"out_channels": bb.injection_channels[0]})
        module = SlcaBlock(enc.embed_dim, cfg, rng)
        x = rng.standard_normal((batch, enc.embed_dim, enc.grid, enc.grid))
        return module, (x,)
    if block == "projector":
        module = ProjectorHead(enc.neck_channels, bb.stage_channels[-1], bb.final_size, rng)
        x = rng.standard_normal((batch, enc.neck_channels, enc.grid, enc.grid))
        return module, (x,)
    if block == "full":
        model = assemble_model(spec.with_(variant="slca_projector"))
        ds = generate(batch * bb.num_classes, enc.input_size, bb.num_classes, seed=spec.seed)
        images = to_feature_map(ds.images[:batch]).astype(np.float64)
        return model, (images, model.encode(images))
    raise ValueError(f"unknown gradcheck block {block!r}; expected one of {BLOCKS}")


def run_gradcheck(spec: ModelSpec, block: str, *, eps: float = 1e-6, samples: int = 50,
                  corrupt: bool = False) -> tuple[GradReport, float]:
    module, inputs = gradcheck_target(spec, block)
    report = grad_check(module, inputs, eps=eps, samples=samples, seed=spec.seed, corrupt=corrupt)
    return report, THRESHOLDS[block]
