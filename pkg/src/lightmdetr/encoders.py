"""Frozen stand-ins for the image and text backbones, and the shared-space projections.

The stubs are seeded random networks: a two-layer per-patch MLP for images
and an embedding table plus transformer layer(s) for text.  They are
registered frozen unless the ``full_train`` baseline is requested.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import RunConfig
from .data import InputError, Scene
from .params import ParamRegistry
from .tensor import DimensionError, Tensor


@dataclass
class ImageFeatures:
    features: Tensor  # (..., N_img, d_backbone_img)
    positions: np.ndarray  # (N_img, d_model)
    grid: tuple[int, int]


@dataclass
class TextFeatures:
    features: Tensor  # (..., L_tok, d_backbone_txt)
    token_ids: np.ndarray  # (..., L_tok) int
    positions: np.ndarray  # (L_tok, d_model)
    mask: np.ndarray | None = None  # (..., L_tok) bool, None when unpadded


def register_backbones(reg: ParamRegistry, cfg: RunConfig, rng: np.random.Generator) -> None:
    trainable = cfg.variant == "full_train"
    reg.add("backbone.image.fc1.weight", nn.xavier_uniform(rng, cfg.raw_patch_dim, cfg.img_hidden), trainable)
    reg.add("backbone.image.fc1.bias", rng.normal(0.0, 0.1, cfg.img_hidden), trainable)
    reg.add("backbone.image.fc2.weight", nn.xavier_uniform(rng, cfg.img_hidden, cfg.d_backbone_img), trainable)
    reg.add("backbone.image.fc2.bias", rng.normal(0.0, 0.1, cfg.d_backbone_img), trainable)
    nn.add_layernorm(reg, "backbone.image.norm", cfg.d_backbone_img, trainable)

    reg.add("backbone.text.embed", rng.normal(0.0, 1.0, (cfg.vocab, cfg.d_backbone_txt)), trainable)
    # absolute position table, standing in for RoBERTa's learned position embeddings
    reg.add("backbone.text.pos", rng.normal(0.0, 1.0, (cfg.max_tokens, cfg.d_backbone_txt)), trainable)
    for i in range(cfg.text_layers):
        nn.add_encoder_block(reg, f"backbone.text.layer{i}", cfg.d_backbone_txt, cfg.text_ffn, rng, trainable)
    nn.add_layernorm(reg, "backbone.text.norm", cfg.d_backbone_txt, trainable)


def register_projections(reg: ParamRegistry, cfg: RunConfig, rng: np.random.Generator) -> None:
    trainable = cfg.train_shared_projections or cfg.variant == "full_train"
    nn.add_linear(reg, "proj.image", cfg.d_backbone_img, cfg.d_model, rng, trainable)
    nn.add_linear(reg, "proj.text", cfg.d_backbone_txt, cfg.d_model, rng, trainable)


def patchify(rasters: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, 3) uint8 -> (..., H/p * W/p, p*p*3) floats in [0, 1], row-major cells."""
    *lead, H, W, C = rasters.shape
    if H % patch or W % patch:
        raise DimensionError(f"raster {H}x{W} does not tile into {patch}x{patch} cells")
    r, c = H // patch, W // patch
    x = np.asarray(rasters, dtype=np.float64).reshape(*lead, r, patch, c, patch, C) / 255.0
    x = np.moveaxis(x, -4, -3)  # (..., r, c, p, p, C)
    return x.reshape(*lead, r * c, patch * patch * C)


def encode_image_rasters(rasters: np.ndarray, reg: ParamRegistry, cfg: RunConfig) -> ImageFeatures:
    rasters = np.asarray(rasters)
    if rasters.shape[-3:] != (cfg.data.raster, cfg.data.raster, 3):
        raise DimensionError(
            f"raster shape {rasters.shape[-3:]} does not match configured {cfg.data.raster}x{cfg.data.raster}x3")
    cells = Tensor(patchify(rasters, cfg.patch))
    h = T.relu(nn.apply_linear(cells, reg, "backbone.image.fc1"))
    # output normalization keeps the features at unit scale per channel, like a
    # real backbone's, so they are not swamped by the UP's residual branches
    feats = nn.apply_layernorm(nn.apply_linear(h, reg, "backbone.image.fc2"), reg, "backbone.image.norm")
    rows, cols = cfg.grid
    return ImageFeatures(feats, nn.sinusoid_2d(rows, cols, cfg.d_model), (rows, cols))


def encode_image(scene: Scene, reg: ParamRegistry, cfg: RunConfig) -> ImageFeatures:
    return encode_image_rasters(scene.raster, reg, cfg)


def encode_token_ids(token_ids: np.ndarray, reg: ParamRegistry, cfg: RunConfig,
                     mask: np.ndarray | None = None) -> TextFeatures:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.shape[-1] == 0:
        raise InputError("caption is empty")
    if ids.shape[-1] > cfg.max_tokens:
        raise InputError(f"caption has {ids.shape[-1]} tokens, more than max_tokens={cfg.max_tokens}")
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise InputError(f"token id outside vocabulary of size {cfg.vocab}")
    n = ids.shape[-1]
    x = reg["backbone.text.embed"][ids] + reg["backbone.text.pos"][np.arange(n)]
    for i in range(cfg.text_layers):
        x = nn.encoder_block(x, reg, f"backbone.text.layer{i}", cfg.text_heads, key_mask=mask)
    x = nn.apply_layernorm(x, reg, "backbone.text.norm")
    return TextFeatures(x, ids, nn.sinusoid_1d(n, cfg.d_model), mask)


def encode_text(caption_tokens, reg: ParamRegistry, cfg: RunConfig) -> TextFeatures:
    return encode_token_ids(np.asarray(caption_tokens, dtype=np.int64), reg, cfg)


def project_to_shared(x, which: str, reg: ParamRegistry, cfg: RunConfig) -> Tensor:
    expected = {"image": cfg.d_backbone_img, "text": cfg.d_backbone_txt}[which]
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.shape[-1] != expected:
        raise DimensionError(f"{which} features have width {x.shape[-1]}, expected {expected}")
    return nn.apply_linear(x, reg, f"proj.{which}")
