"""Independent hand enumeration of parameter counts from a config's declared widths."""
from lightmdetr.config import RunConfig


def block(d, f):
    """Pre-norm encoder block: 2 layer norms, q/v/o with bias and k without, 2-layer FFN."""
    return 2 * 2 * d + (4 * d * d + 3 * d) + (d * f + f) + (f * d + d)


def decoder_block(d, f):
    return 3 * 2 * d + 2 * (4 * d * d + 3 * d) + (d * f + f) + (f * d + d)


def hand_count(c: RunConfig) -> dict:
    d, L, Q, k = c.d_model, c.max_tokens, c.num_queries, c.contrastive_width
    # patch MLP with an output layer norm
    image = (c.patch ** 2 * 3) * c.img_hidden + c.img_hidden + c.img_hidden * c.d_backbone_img + 3 * c.d_backbone_img
    # token and position tables, encoder blocks, output layer norm
    text = (c.vocab + c.max_tokens) * c.d_backbone_txt + c.text_layers * block(c.d_backbone_txt, c.text_ffn)
    text += 2 * c.d_backbone_txt
    proj = (c.d_backbone_img + 1) * d + (c.d_backbone_txt + 1) * d
    up = 2 * d + c.up_layers * block(d, c.d_ffn) + 2 * d
    if c.fusion == "concat":
        up += 2 * d * d + d
    if c.fusion == "cross_attention":
        up += 3 * d * d + 2 * d
    plus = 6 * d * d + 2 * block(d, c.plus_ffn_width) if c.variant == "plus" else 0
    head = (c.enc_layers * block(d, c.head_ffn) + 2 * d + Q * d + c.dec_layers * decoder_block(d, c.head_ffn)
            + 2 * d + 2 * (d * d + d) + (4 * d + 4) + (d * (L + 1) + L + 1) + 2 * (d * k + k))
    if c.variant == "full_train":
        return {"trainable_backbone": image + text + proj, "frozen_backbone": 0, "head": head}
    frozen = image + text
    trainable = up + plus + (proj if c.train_shared_projections else 0)
    frozen += 0 if c.train_shared_projections else proj
    return {"trainable_backbone": trainable, "frozen_backbone": frozen, "head": head}
