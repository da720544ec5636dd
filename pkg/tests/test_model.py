"""Encoders, fusion/UP, Plus cross-fusion and the detection head."""
import numpy as np
import pytest

from lightmdetr import encoders, fusion, nn
from lightmdetr.config import tiny_config
from lightmdetr.data import InputError, generate, generate_split
from lightmdetr.head import Predictions, box_confidence, detect, phrase_score
from lightmdetr.losses import total_loss
from lightmdetr.model import LightMDETR, build_registry, collate
from lightmdetr.params import Adam
from lightmdetr.tensor import DimensionError, Tensor


@pytest.fixture(scope="module")
def cfg():
    return tiny_config()


@pytest.fixture(scope="module")
def scenes(cfg):
    return generate_split(cfg.data, "train")


class TestFrozenEncoders:
    def test_patchify_row_major_cells(self):
        raster = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
        cells = encoders.patchify(raster, 2)
        assert cells.shape == (4, 12)
        # second cell is the top-right 2x2 block
        np.testing.assert_array_equal(cells[1] * 255, raster[0:2, 2:4].reshape(-1))

    def test_feature_shapes(self, cfg, scenes):
        reg = build_registry(cfg)
        img = encoders.encode_image(scenes[0], reg, cfg)
        txt = encoders.encode_text(scenes[0].caption_tokens, reg, cfg)
        assert img.features.shape == (cfg.n_img, cfg.d_backbone_img)
        assert txt.features.shape == (len(scenes[0].caption_tokens), cfg.d_backbone_txt)
        assert img.positions.shape == (cfg.n_img, cfg.d_model)

    def test_backbones_frozen_and_gradient_free(self, cfg, scenes):
        model = LightMDETR(cfg)
        batch = collate(scenes[:2])
        total_loss(model(batch), batch.targets).total.backward()
        for name, entry in model.registry.items():
            if name.startswith("backbone."):
                assert not entry.trainable and entry.tensor.grad is None
            else:
                assert entry.trainable and entry.tensor.grad is not None, name

    def test_full_train_backbones_trainable(self):
        reg = build_registry(tiny_config(variant="full_train"))
        assert all(reg.is_trainable(n) for n in reg if n.startswith("backbone."))
        assert "tokens.image" not in reg

    def test_bad_raster_shape(self, cfg):
        reg = build_registry(cfg)
        with pytest.raises(DimensionError):
            encoders.encode_image_rasters(np.zeros((6, 6, 3), np.uint8), reg, cfg)

    def test_caption_too_long(self, cfg):
        reg = build_registry(cfg)
        with pytest.raises(InputError):
            encoders.encode_text([0] * (cfg.max_tokens + 1), reg, cfg)

    def test_projection_width_checked(self, cfg):
        reg = build_registry(cfg)
        with pytest.raises(DimensionError):
            encoders.project_to_shared(np.zeros((3, cfg.d_backbone_img + 1)), "image", reg, cfg)


class TestFuse:
    def test_add_and_mul(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        t = np.array([10.0, -1.0])
        np.testing.assert_array_equal(fusion.fuse(x, t, "add").data, [[11, 1], [13, 3]])
        np.testing.assert_array_equal(fusion.fuse(x, t, "mul").data, [[10, -2], [30, -4]])

    def test_concat_doubles_width(self):
        out = fusion.fuse(np.zeros((3, 2)), np.array([5.0, 6.0]), "concat")
        np.testing.assert_array_equal(out.data, [[0, 0, 5, 6]] * 3)

    def test_token_width_mismatch(self):
        with pytest.raises(DimensionError):
            fusion.fuse(np.zeros((3, 2)), np.zeros(3), "add")

    @pytest.mark.parametrize("op", ["add", "mul", "concat", "cross_attention"])
    def test_every_operator_runs_end_to_end(self, op, scenes):
        model = LightMDETR(tiny_config(fusion=op))
        pred = model(collate(scenes[:2]))
        assert np.all(np.isfinite(pred.boxes.data))


def shared_input_model(op="add"):
    cfg = tiny_config(fusion=op)
    return cfg, build_registry(cfg)


class TestModalitySwitch:
    """Identical features through the UP: outputs agree iff the tokens agree."""

    @pytest.mark.parametrize("op", ["add", "mul", "concat", "cross_attention"])
    def test_equal_tokens_equal_outputs(self, op):
        cfg, reg = shared_input_model(op)
        x = np.random.default_rng(0).normal(size=(5, cfg.d_model))
        reg["tokens.text"].data = reg["tokens.image"].data.copy()
        o_up = fusion.up_forward(fusion.fuse(x, reg["tokens.image"], op, reg), reg, cfg)
        t_up = fusion.up_forward(fusion.fuse(x, reg["tokens.text"], op, reg), reg, cfg)
        assert np.array_equal(o_up.data, t_up.data)

    def test_tokens_differ_after_one_step(self, scenes):
        cfg, reg = shared_input_model()
        reg["tokens.text"].data = reg["tokens.image"].data.copy()
        model = LightMDETR(cfg, reg)
        batch = collate(scenes[:2])
        reg.zero_grad()
        total_loss(model(batch), batch.targets).total.backward()
        Adam(lr=1e-3).step(reg)
        x = np.random.default_rng(0).normal(size=(5, cfg.d_model))
        o_up = fusion.up_forward(fusion.fuse(x, reg["tokens.image"], "add"), reg, cfg)
        t_up = fusion.up_forward(fusion.fuse(x, reg["tokens.text"], "add"), reg, cfg)
        assert np.max(np.abs(o_up.data - t_up.data)) > 0


def pass_through(reg, block):
    """Zero the residual branches so the pre-norm block is the identity."""
    for name in (f"{block}.attn.o.weight", f"{block}.attn.o.bias", f"{block}.ffn.fc2.weight", f"{block}.ffn.fc2.bias"):
        reg[name].data = np.zeros_like(reg[name].data)


class TestPlus:
    def test_shared_tensors_identical_to_light(self):
        light = build_registry(tiny_config())
        plus = build_registry(tiny_config(variant="plus"))
        for name, entry in light.items():
            assert np.array_equal(entry.tensor.data, plus[name].data), name

    def test_reduces_to_light(self, scenes):
        batch = collate(scenes[:3])
        light = LightMDETR(tiny_config())(batch)
        plus = LightMDETR(tiny_config(variant="plus"))
        reg = plus.registry
        for name in ("W_outO", "W_outT"):
            reg[f"plus.cross.{name}"].data = np.zeros_like(reg[f"plus.cross.{name}"].data)
        pass_through(reg, "plus.p1")
        pass_through(reg, "plus.p2")
        out = plus(batch)
        for a, b in [(light.boxes, out.boxes), (light.token_logits, out.token_logits),
                     (light.object_embeddings, out.object_embeddings)]:
            assert np.max(np.abs(a.data - b.data)) <= 1e-12

    def test_cross_fusion_output_shapes_and_attention_rows(self):
        cfg = tiny_config(variant="plus")
        reg = build_registry(cfg)
        rng = np.random.default_rng(1)
        O = Tensor(rng.normal(size=(6, cfg.d_model)))
        Tx = Tensor(rng.normal(size=(3, cfg.d_model)))
        o_f, t_f = fusion.cross_fuse(O, Tx, reg, cfg)
        assert o_f.shape == (6, cfg.d_model) and t_f.shape == (3, cfg.d_model)
        a_ot, a_to = fusion.cross_attention_weights(O, Tx, reg, cfg)
        np.testing.assert_allclose(a_ot.sum(-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(a_to.sum(-1), 1.0, atol=1e-12)

    def test_cross_fusion_matches_hand_formula(self):
        cfg = tiny_config(variant="plus")
        reg = build_registry(cfg)
        rng = np.random.default_rng(2)
        O, Tx = rng.normal(size=(4, cfg.d_model)), rng.normal(size=(3, cfg.d_model))
        W = {n: reg[f"plus.cross.{n}"].data for n in ("W_qI", "W_qT", "W_vT", "W_vO", "W_outO", "W_outT")}
        A = (O @ W["W_qI"]) @ (Tx @ W["W_qT"]).T / np.sqrt(cfg.d_model)

        def softmax(z):
            e = np.exp(z - z.max(-1, keepdims=True))
            return e / e.sum(-1, keepdims=True)

        expect_o = softmax(A) @ (Tx @ W["W_vT"]) @ W["W_outO"]
        expect_t = softmax(A.T) @ (O @ W["W_vO"]) @ W["W_outT"]
        o_f, t_f = fusion.cross_fuse(Tensor(O), Tensor(Tx), reg, cfg)
        np.testing.assert_allclose(o_f.data, expect_o, atol=1e-12)
        np.testing.assert_allclose(t_f.data, expect_t, atol=1e-12)


class TestHead:
    def test_shapes_ranges_and_norms(self, cfg, scenes):
        pred = LightMDETR(cfg)(collate(scenes[:2]))
        B, Q = 2, cfg.num_queries
        assert pred.boxes.shape == (B, Q, 4)
        assert pred.token_logits.shape == (B, Q, cfg.max_tokens + 1)
        assert np.all((pred.boxes.data > 0) & (pred.boxes.data < 1))
        np.testing.assert_allclose(np.linalg.norm(pred.object_embeddings.data, axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(pred.token_embeddings.data, axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(pred.token_probs().sum(-1), 1.0, atol=1e-12)

    def test_padding_does_not_change_predictions(self, cfg, scenes):
        model = LightMDETR(cfg)
        lengths = [len(s.caption_tokens) for s in scenes]
        assert len(set(lengths)) > 1
        together = model(collate(scenes))
        for b, s in enumerate(scenes):
            alone = model(collate([s]))
            n = len(s.caption_tokens)
            np.testing.assert_allclose(together.boxes.data[b], alone.boxes.data[0], atol=1e-12)
            np.testing.assert_allclose(together.token_logits.data[b], alone.token_logits.data[0], atol=1e-12)
            np.testing.assert_allclose(together.token_embeddings.data[b, :n], alone.token_embeddings.data[0], atol=1e-12)

    def test_query_permutation_equivariance(self, cfg, scenes):
        model = LightMDETR(cfg)
        batch = collate(scenes[:1])
        before = model(batch)
        perm = np.random.default_rng(0).permutation(cfg.num_queries)
        model.registry["head.queries"].data = model.registry["head.queries"].data[perm]
        after = model(batch)
        np.testing.assert_allclose(after.boxes.data[0], before.boxes.data[0][perm], atol=1e-12)
        np.testing.assert_allclose(after.token_logits.data[0], before.token_logits.data[0][perm], atol=1e-12)

    def test_too_many_tokens(self, cfg):
        reg = build_registry(cfg)
        n = cfg.max_tokens + 1
        with pytest.raises(InputError):
            detect(Tensor(np.zeros((4, cfg.d_model))), Tensor(np.zeros((n, cfg.d_model))), reg, cfg)


def fixed_predictions(logits):
    logits = np.asarray(logits, dtype=np.float64)
    Q, S = logits.shape
    return Predictions(Tensor(np.full((Q, 4), 0.5)), Tensor(logits),
                       Tensor(np.eye(Q, 2)), Tensor(np.eye(S - 1, 2)))


class TestScores:
    def test_uniform_confidence(self):
        pred = fixed_predictions(np.zeros((2, 17)))
        np.testing.assert_allclose(box_confidence(pred), 1 - 1 / 17, atol=1e-15)

    def test_confident_no_object(self):
        logits = np.zeros((1, 5))
        logits[0, -1] = 700.0
        assert box_confidence(fixed_predictions(logits))[0] < 1e-300

    def test_full_span_equals_confidence(self):
        logits = np.random.default_rng(0).normal(size=(3, 6))
        pred = fixed_predictions(logits)
        np.testing.assert_allclose(phrase_score(pred, (0, 5)), box_confidence(pred), atol=1e-15)

    def test_hand_ranking(self):
        # query 0: p = e^[2,0,0,0]/(e^2+3); query 1: p = e^[0,1,1,0]/(2e+2)
        pred = fixed_predictions([[2.0, 0, 0, 0], [0, 1.0, 1.0, 0]])
        score = phrase_score(pred, (1, 3))
        expect = [2 / (np.e ** 2 + 3), 2 * np.e / (2 * np.e + 2)]
        np.testing.assert_allclose(score, expect, atol=1e-15)
        assert list(np.argsort(-score)) == [1, 0]

    def test_span_validation(self):
        pred = fixed_predictions(np.zeros((1, 5)))
        with pytest.raises(InputError):
            phrase_score(pred, [])
        with pytest.raises(InputError):
            phrase_score(pred, (3, 6))
