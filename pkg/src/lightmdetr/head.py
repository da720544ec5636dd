"""DETR-style encoder-decoder over the concatenated (image || text) sequence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import RunConfig
from .data import InputError
from .params import ParamRegistry
from .tensor import Tensor


@dataclass
class Predictions:
    boxes: Tensor  # (..., Q, 4) normalized cx, cy, w, h
    token_logits: Tensor  # (..., Q, L+1); last column is the no-object slot
    object_embeddings: Tensor  # (..., Q, d_contrastive), unit rows
    token_embeddings: Tensor  # (..., L_tok, d_contrastive), unit rows
    token_mask: np.ndarray | None = None  # (..., L_tok) bool

    def token_probs(self) -> np.ndarray:
        return T.softmax(self.token_logits.data, axis=-1).data


def register_head(reg: ParamRegistry, cfg: RunConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    for i in range(cfg.enc_layers):
        nn.add_encoder_block(reg, f"head.enc{i}", d, cfg.head_ffn, rng, out_scale=nn.residual_scale(cfg.enc_layers))
    nn.add_layernorm(reg, "head.enc_norm", d)
    reg.add("head.queries", rng.normal(0.0, 1.0, (cfg.num_queries, d)))
    for i in range(cfg.dec_layers):
        nn.add_decoder_block(reg, f"head.dec{i}", d, cfg.head_ffn, rng, out_scale=nn.residual_scale(cfg.dec_layers))
    nn.add_layernorm(reg, "head.dec_norm", d)
    nn.add_linear(reg, "head.box.fc1", d, d, rng)
    nn.add_linear(reg, "head.box.fc2", d, d, rng)
    nn.add_linear(reg, "head.box.fc3", d, 4, rng)
    nn.add_linear(reg, "head.token", d, cfg.max_tokens + 1, rng)
    nn.add_linear(reg, "head.contrast_obj", d, cfg.contrastive_width, rng)
    nn.add_linear(reg, "head.contrast_txt", d, cfg.contrastive_width, rng)


def detect(o_up, t_up, reg: ParamRegistry, cfg: RunConfig,
           img_pos: np.ndarray | None = None, txt_pos: np.ndarray | None = None,
           text_mask: np.ndarray | None = None) -> Predictions:
    n_img, l_tok = o_up.shape[-2], t_up.shape[-2]
    if l_tok > cfg.max_tokens:
        raise InputError(f"{l_tok} text tokens exceed max_tokens={cfg.max_tokens}")
    memory = T.concat([o_up, t_up], axis=-2)
    pos = None
    if cfg.pos_embed == "head" and img_pos is not None:
        pos = np.concatenate([img_pos, txt_pos], axis=0)
    mem_mask = None
    if text_mask is not None:
        text_mask = np.asarray(text_mask, dtype=bool)
        img_ok = np.ones(text_mask.shape[:-1] + (n_img,), dtype=bool)
        mem_mask = np.concatenate([img_ok, text_mask], axis=-1)
    for i in range(cfg.enc_layers):
        memory = nn.encoder_block(memory, reg, f"head.enc{i}", cfg.head_heads, key_mask=mem_mask, pos=pos)
    memory = nn.apply_layernorm(memory, reg, "head.enc_norm")

    # DETR wiring: the learned queries are positional codes for a zero target
    query_pos = reg["head.queries"]
    h = Tensor(np.zeros(memory.shape[:-2] + query_pos.shape))
    for i in range(cfg.dec_layers):
        h = nn.decoder_block(h, memory, reg, f"head.dec{i}", cfg.head_heads, memory_mask=mem_mask,
                             query_pos=query_pos, memory_pos=pos)
    h = nn.apply_layernorm(h, reg, "head.dec_norm")

    b = T.relu(nn.apply_linear(h, reg, "head.box.fc1"))
    b = T.relu(nn.apply_linear(b, reg, "head.box.fc2"))
    boxes = T.sigmoid(nn.apply_linear(b, reg, "head.box.fc3"))
    logits = nn.apply_linear(h, reg, "head.token")
    obj = T.l2_normalize(nn.apply_linear(h, reg, "head.contrast_obj"))
    txt_mem = memory[..., n_img:, :]
    txt = T.l2_normalize(nn.apply_linear(txt_mem, reg, "head.contrast_txt"))
    return Predictions(boxes, logits, obj, txt, text_mask)


def box_confidence(pred: Predictions) -> np.ndarray:
    """1 - P(no-object) per query."""
    return 1.0 - pred.token_probs()[..., -1]


def phrase_score(pred: Predictions, span) -> np.ndarray:
    """Probability mass each query puts on the span's token positions.

    ``span`` is a half-open (start, end) pair or an explicit list of positions.
    """
    positions = _span_positions(span)
    n_tok = pred.token_embeddings.shape[-2]
    if positions[0] < 0 or positions[-1] >= n_tok:
        raise InputError(f"span {span} outside the caption's {n_tok} tokens")
    return pred.token_probs()[..., positions].sum(axis=-1)


def _span_positions(span) -> list[int]:
    if isinstance(span, tuple) and len(span) == 2 and all(isinstance(v, (int, np.integer)) for v in span):
        positions = list(range(span[0], span[1]))
    else:
        positions = sorted(int(p) for p in span)
    if not positions:
        raise InputError("span is empty")
    return positions
