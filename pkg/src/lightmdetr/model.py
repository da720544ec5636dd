"""Model assembly: registry construction, batch collation, forward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoders, fusion, head
from .config import RunConfig
from .data import Scene
from .head import Predictions
from .losses import GroundTruth
from .params import ParamRegistry


@dataclass
class Batch:
    scene_ids: list[str]
    rasters: np.ndarray  # (B, H, W, 3) uint8
    token_ids: np.ndarray  # (B, L_max) int, padded with 0
    token_mask: np.ndarray  # (B, L_max) bool
    targets: list[GroundTruth]

    def __len__(self) -> int:
        return len(self.scene_ids)


def collate(scenes: list[Scene]) -> Batch:
    L = max(len(s.caption_tokens) for s in scenes)
    ids = np.zeros((len(scenes), L), dtype=np.int64)
    mask = np.zeros((len(scenes), L), dtype=bool)
    for b, s in enumerate(scenes):
        ids[b, : len(s.caption_tokens)] = s.caption_tokens
        mask[b, : len(s.caption_tokens)] = True
    return Batch(
        scene_ids=[s.scene_id for s in scenes],
        rasters=np.stack([s.raster for s in scenes]),
        token_ids=ids,
        token_mask=mask,
        targets=[GroundTruth.from_scene(s) for s in scenes],
    )


class _ShapeOnlyRNG:
    """Stands in for a Generator when only parameter shapes are needed."""

    def normal(self, loc=0.0, scale=1.0, size=None):
        return np.broadcast_to(np.float64(0.0), size)

    uniform = normal


def build_registry(cfg: RunConfig, shapes_only: bool = False) -> ParamRegistry:
    """Every tensor of the model, initialized from ``cfg.seed``.

    Registration order is fixed (backbones, projections, fusion/UP, head,
    Plus layers) and each group draws from its own seeded stream, so the light
    and Plus variants share identical values for their common tensors.
    With ``shapes_only`` no values are drawn or stored (parameter accounting
    at paper scale).
    """
    reg = ParamRegistry(shapes_only)
    if shapes_only:
        rng = [_ShapeOnlyRNG()] * 5
    else:
        rng = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(5)]
    encoders.register_backbones(reg, cfg, rng[0])
    encoders.register_projections(reg, cfg, rng[1])
    if cfg.variant != "full_train":
        fusion.register_fusion_up(reg, cfg, rng[2])
    head.register_head(reg, cfg, rng[3])
    if cfg.variant == "plus":
        fusion.register_plus(reg, cfg, rng[4])
    return reg


class LightMDETR:
    """Frozen stub backbones + UP (+ Plus cross-fusion) + DETR head."""

    def __init__(self, cfg: RunConfig, registry: ParamRegistry | None = None):
        self.cfg = cfg
        self.registry = registry if registry is not None else build_registry(cfg)

    def encode(self, batch: Batch):
        cfg, reg = self.cfg, self.registry
        img = encoders.encode_image_rasters(batch.rasters, reg, cfg)
        txt = encoders.encode_token_ids(batch.token_ids, reg, cfg, mask=batch.token_mask)
        o_up, t_up = fusion.encode_both(img, txt, reg, cfg)
        return img, txt, o_up, t_up

    def forward(self, batch: Batch) -> Predictions:
        img, txt, o_up, t_up = self.encode(batch)
        return head.detect(o_up, t_up, self.registry, self.cfg, img.positions, txt.positions,
                           text_mask=batch.token_mask)

    __call__ = forward
