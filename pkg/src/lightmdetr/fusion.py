"""Modality tokens, the fusion operator, the shared UP encoder and the Plus cross-fusion.

One UP weight set (``up.*``) serves both modalities; what tells it which
modality it is looking at is the learnable token fused into its input.
"""
from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .config import RunConfig
from .encoders import ImageFeatures, TextFeatures, project_to_shared
from .params import ParamRegistry
from .tensor import DimensionError, Tensor


def register_fusion_up(reg: ParamRegistry, cfg: RunConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    reg.add("tokens.image", rng.normal(0.0, 0.02, d))
    reg.add("tokens.text", rng.normal(0.0, 0.02, d))
    if cfg.fusion == "concat":
        nn.add_linear(reg, "fuse.adapter", 2 * d, d, rng)
    elif cfg.fusion == "cross_attention":
        for proj in ("q", "k", "v"):
            nn.add_linear(reg, f"fuse.{proj}", d, d, rng, bias=proj != "k")
    for i in range(cfg.up_layers):
        nn.add_encoder_block(reg, f"up.layer{i}", d, cfg.d_ffn, rng, out_scale=nn.residual_scale(cfg.up_layers))
    nn.add_layernorm(reg, "up.norm", d)


def register_plus(reg: ParamRegistry, cfg: RunConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    for name in ("W_qI", "W_qT", "W_vT", "W_vO", "W_outO", "W_outT"):
        reg.add(f"plus.cross.{name}", nn.xavier_uniform(rng, d, d))
    nn.add_encoder_block(reg, "plus.p1", d, cfg.plus_ffn_width, rng)
    nn.add_encoder_block(reg, "plus.p2", d, cfg.plus_ffn_width, rng)


def fuse(x, token, op: str, reg: ParamRegistry | None = None) -> Tensor:
    """Combine features ``x`` (..., n, d) with one modality token (d,)."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    token = token if isinstance(token, Tensor) else Tensor(np.asarray(token, dtype=np.float64))
    d = x.shape[-1]
    if token.shape != (d,):
        raise DimensionError(f"token shape {token.shape} does not match feature width {d}")
    if op == "add":
        return x + token
    if op == "mul":
        return x * token
    if op == "concat":
        rows = T.broadcast_to(token, x.shape)
        return T.concat([x, rows], axis=-1)
    if op == "cross_attention":
        # each row attends over two keys, itself and the token: a learned,
        # content-dependent mix of the row and the modality token
        q = nn.apply_linear(x, reg, "fuse.q")
        k_self = nn.apply_linear(x, reg, "fuse.k")
        v_self = nn.apply_linear(x, reg, "fuse.v")
        k_tok = nn.apply_linear(token.reshape(1, d), reg, "fuse.k")
        v_tok = nn.apply_linear(token.reshape(1, d), reg, "fuse.v")
        scores = T.concat([(q * k_self).sum(axis=-1, keepdims=True),
                           T.matmul(q, k_tok.T)], axis=-1)
        w = T.softmax(scores * (1.0 / np.sqrt(d)), axis=-1)
        return x + w[..., 0:1] * v_self + w[..., 1:2] * v_tok
    raise ValueError(f"unknown fusion op {op!r}")


def up_forward(x, reg: ParamRegistry, cfg: RunConfig, key_mask: np.ndarray | None = None) -> Tensor:
    """Run the shared pre-norm UP encoder over the rows of ``x``."""
    if cfg.fusion == "concat":
        if x.shape[-1] != 2 * cfg.d_model:
            raise DimensionError(f"UP input width {x.shape[-1]}, expected {2 * cfg.d_model}")
        x = nn.apply_linear(x, reg, "fuse.adapter")
    elif x.shape[-1] != cfg.d_model:
        raise DimensionError(f"UP input width {x.shape[-1]}, expected {cfg.d_model}")
    for i in range(cfg.up_layers):
        x = nn.encoder_block(x, reg, f"up.layer{i}", cfg.up_heads, key_mask=key_mask)
    return nn.apply_layernorm(x, reg, "up.norm")


def cross_fuse(O, Tx, reg: ParamRegistry, cfg: RunConfig,
               text_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Bidirectional image/text cross-attention of the Plus variant.

    Scores are ``(O W_qI)(T W_qT)^T / sqrt(d)``; image rows attend over
    tokens and token rows attend over image cells using the same scores.
    """
    d = cfg.d_model
    if O.shape[-1] != d or Tx.shape[-1] != d:
        raise DimensionError(f"cross_fuse expects width {d}, got {O.shape[-1]} and {Tx.shape[-1]}")
    h = cfg.cross_fusion_heads
    p = "plus.cross."
    oq = nn._split_heads(T.matmul(O, reg[p + "W_qI"]), h)
    tq = nn._split_heads(T.matmul(Tx, reg[p + "W_qT"]), h)
    tv = nn._split_heads(T.matmul(Tx, reg[p + "W_vT"]), h)
    ov = nn._split_heads(T.matmul(O, reg[p + "W_vO"]), h)
    attn = T.matmul(oq, tq.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // h))  # (..., h, N_img, L_tok)
    if text_mask is not None:
        attn = attn + nn.key_bias(text_mask)
    o_f = T.matmul(nn._merge_heads(T.matmul(T.softmax(attn, axis=-1), tv)), reg[p + "W_outO"])
    t_f = T.matmul(nn._merge_heads(T.matmul(T.softmax(attn.swapaxes(-1, -2), axis=-1), ov)), reg[p + "W_outT"])
    return o_f, t_f


def cross_attention_weights(O, Tx, reg: ParamRegistry, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized image->text and text->image attention maps (inspection helper)."""
    h = cfg.cross_fusion_heads
    oq = nn._split_heads(T.matmul(O, reg["plus.cross.W_qI"]), h).data
    tq = nn._split_heads(T.matmul(Tx, reg["plus.cross.W_qT"]), h).data
    attn = oq @ np.swapaxes(tq, -1, -2) / np.sqrt(cfg.d_model // h)
    return T.softmax(attn, -1).data, T.softmax(np.swapaxes(attn, -1, -2), -1).data


def plus_project(O, Tx, O_F, T_F, reg: ParamRegistry, cfg: RunConfig,
                 text_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    o_p1 = nn.encoder_block(O_F + O, reg, "plus.p1", cfg.up_heads)
    t_p2 = nn.encoder_block(T_F + Tx, reg, "plus.p2", cfg.up_heads, key_mask=text_mask)
    return o_p1, t_p2


def encode_both(image: ImageFeatures, text: TextFeatures, reg: ParamRegistry,
                cfg: RunConfig, variant: str | None = None) -> tuple[Tensor, Tensor]:
    """Shared-space projections, optional cross-fusion, then the UP per modality."""
    variant = variant or cfg.variant
    O = project_to_shared(image.features, "image", reg, cfg)
    Tx = project_to_shared(text.features, "text", reg, cfg)
    if cfg.pos_embed == "up":
        O = O + image.positions
        Tx = Tx + text.positions
    if variant == "full_train":
        return O, Tx
    if variant == "plus":
        O_F, T_F = cross_fuse(O, Tx, reg, cfg, text.mask)
        O, Tx = plus_project(O, Tx, O_F, T_F, reg, cfg, text.mask)
    o_up = up_forward(fuse(O, reg["tokens.image"], cfg.fusion, reg), reg, cfg)
    t_up = up_forward(fuse(Tx, reg["tokens.text"], cfg.fusion, reg), reg, cfg, key_mask=text.mask)
    return o_up, t_up
