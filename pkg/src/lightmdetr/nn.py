"""Transformer building blocks over the tensor engine.

Parameters live in a :class:`ParamRegistry` under dotted prefixes; the
functions here only read them.  Weights are stored (in, out) so a layer is
``x @ W + b``.  Every function accepts arbitrary leading batch axes.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamRegistry
from .tensor import DimensionError, Tensor

MASK_FILL = -1e9


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def add_linear(reg: ParamRegistry, name: str, d_in: int, d_out: int, rng: np.random.Generator,
               trainable: bool = True, bias: bool = True) -> None:
    reg.add(f"{name}.weight", xavier_uniform(rng, d_in, d_out), trainable)
    if bias:
        reg.add(f"{name}.bias", np.zeros(d_out), trainable)


def _rescale(reg: ParamRegistry, name: str, factor: float) -> None:
    if factor != 1.0 and not reg.shapes_only:
        reg[name].data = reg[name].data * factor


def apply_linear(x, reg: ParamRegistry, name: str) -> Tensor:
    w = reg[f"{name}.weight"]
    b = reg[f"{name}.bias"] if f"{name}.bias" in reg else None
    return T.linear(x, w, b)


def add_layernorm(reg: ParamRegistry, name: str, d: int, trainable: bool = True) -> None:
    reg.add(f"{name}.gain", np.ones(d), trainable)
    reg.add(f"{name}.bias", np.zeros(d), trainable)


def apply_layernorm(x, reg: ParamRegistry, name: str) -> Tensor:
    return T.layernorm(x, reg[f"{name}.gain"], reg[f"{name}.bias"])


# -- attention ---------------------------------------------------------------
def add_attention(reg: ParamRegistry, name: str, d: int, rng: np.random.Generator,
                  trainable: bool = True, out_scale: float = 1.0) -> None:
    # no key bias: it shifts every score of a query equally, which softmax ignores
    for proj in ("q", "k", "v", "o"):
        add_linear(reg, f"{name}.{proj}", d, d, rng, trainable, bias=proj != "k")
    _rescale(reg, f"{name}.o.weight", out_scale)


def key_bias(key_mask: np.ndarray | None) -> np.ndarray | None:
    """Additive score bias broadcasting over (..., heads, n_q, n_k)."""
    if key_mask is None:
        return None
    key_mask = np.asarray(key_mask, dtype=bool)
    return np.where(key_mask, 0.0, MASK_FILL)[..., None, None, :]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    if d % n_heads:
        raise DimensionError(f"width {d} is not divisible by {n_heads} heads")
    return x.reshape(*lead, n, n_heads, d // n_heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def attention(q_in, k_in, v_in, reg: ParamRegistry, name: str, n_heads: int,
              key_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention with learned q/k/v/o maps."""
    q = _split_heads(apply_linear(q_in, reg, f"{name}.q"), n_heads)
    k = _split_heads(apply_linear(k_in, reg, f"{name}.k"), n_heads)
    v = _split_heads(apply_linear(v_in, reg, f"{name}.v"), n_heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = T.matmul(q, k.swapaxes(-1, -2)) * scale
    bias = key_bias(key_mask)
    if bias is not None:
        scores = scores + bias
    out = _merge_heads(T.matmul(T.softmax(scores, axis=-1), v))
    return apply_linear(out, reg, f"{name}.o")


# -- blocks --------------------------------------------------------------------
def add_ffn(reg: ParamRegistry, name: str, d: int, d_ffn: int, rng: np.random.Generator,
            trainable: bool = True, out_scale: float = 1.0) -> None:
    add_linear(reg, f"{name}.fc1", d, d_ffn, rng, trainable)
    add_linear(reg, f"{name}.fc2", d_ffn, d, rng, trainable)
    _rescale(reg, f"{name}.fc2.weight", out_scale)


def apply_ffn(x, reg: ParamRegistry, name: str) -> Tensor:
    return apply_linear(T.relu(apply_linear(x, reg, f"{name}.fc1")), reg, f"{name}.fc2")


def residual_scale(n_layers: int) -> float:
    """Init scale of residual-branch output maps in an n-layer stack (GPT-2 style).

    Keeps the residual stream from being dominated at initialization by the
    near-uniform attention averages every layer adds to all rows alike.
    """
    return 1.0 / np.sqrt(2.0 * n_layers)


def add_encoder_block(reg: ParamRegistry, name: str, d: int, d_ffn: int, rng: np.random.Generator,
                      trainable: bool = True, out_scale: float = 1.0) -> None:
    add_layernorm(reg, f"{name}.ln1", d, trainable)
    add_attention(reg, f"{name}.attn", d, rng, trainable, out_scale)
    add_layernorm(reg, f"{name}.ln2", d, trainable)
    add_ffn(reg, f"{name}.ffn", d, d_ffn, rng, trainable, out_scale)


def encoder_block(x, reg: ParamRegistry, name: str, n_heads: int,
                  key_mask: np.ndarray | None = None, pos=None) -> Tensor:
    """Pre-norm self-attention + feed-forward block.

    ``pos``, when given, is added to the query/key inputs only.
    """
    h = apply_layernorm(x, reg, f"{name}.ln1")
    qk = h if pos is None else h + pos
    x = x + attention(qk, qk, h, reg, f"{name}.attn", n_heads, key_mask)
    return x + apply_ffn(apply_layernorm(x, reg, f"{name}.ln2"), reg, f"{name}.ffn")


def add_decoder_block(reg: ParamRegistry, name: str, d: int, d_ffn: int, rng: np.random.Generator,
                      trainable: bool = True, out_scale: float = 1.0) -> None:
    add_layernorm(reg, f"{name}.ln1", d, trainable)
    add_attention(reg, f"{name}.self_attn", d, rng, trainable, out_scale)
    add_layernorm(reg, f"{name}.ln2", d, trainable)
    add_attention(reg, f"{name}.cross_attn", d, rng, trainable, out_scale)
    add_layernorm(reg, f"{name}.ln3", d, trainable)
    add_ffn(reg, f"{name}.ffn", d, d_ffn, rng, trainable, out_scale)


def decoder_block(x, memory, reg: ParamRegistry, name: str, n_heads: int,
                  memory_mask: np.ndarray | None = None, query_pos=None, memory_pos=None) -> Tensor:
    """Pre-norm decoder block (DETR wiring).

    ``query_pos`` is added to the query/key inputs of self-attention and to
    the query input of cross-attention; ``memory_pos`` to the cross-attention
    keys.  Values never carry positions.
    """
    h = apply_layernorm(x, reg, f"{name}.ln1")
    qk = h if query_pos is None else h + query_pos
    x = x + attention(qk, qk, h, reg, f"{name}.self_attn", n_heads)
    h = apply_layernorm(x, reg, f"{name}.ln2")
    q = h if query_pos is None else h + query_pos
    k = memory if memory_pos is None else memory + memory_pos
    x = x + attention(q, k, memory, reg, f"{name}.cross_attn", n_heads, memory_mask)
    return x + apply_ffn(apply_layernorm(x, reg, f"{name}.ln3"), reg, f"{name}.ffn")


# -- positional encodings --------------------------------------------------------
def sinusoid_1d(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange((d + 1) // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)[:, : d // 2]
    return out


def sinusoid_2d(rows: int, cols: int, d: int) -> np.ndarray:
    """DETR-style encoding: half the channels encode y, half encode x."""
    half = d // 2
    ey = sinusoid_1d(rows, half)
    ex = sinusoid_1d(cols, d - half)
    grid_y = np.repeat(ey, cols, axis=0)
    grid_x = np.tile(ex, (rows, 1))
    return np.concatenate([grid_y, grid_x], axis=1)
