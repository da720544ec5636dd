import itertools

import numpy as np
import pytest

from lightmdetr.data import (
    ConfigError,
    InputError,
    SplitSpec,
    Vocabulary,
    distractor_caption,
    generate,
    read_scenes,
    shape_mask,
    write_scenes,
)
from lightmdetr.losses import GroundTruth


@pytest.fixture
def spec():
    return SplitSpec(seed=7)


def test_deterministic(spec):
    a, b = generate(spec, 11), generate(spec, 11)
    assert a.scene_id == b.scene_id
    assert a.raster.tobytes() == b.raster.tobytes()
    assert a.caption_tokens == b.caption_tokens
    assert a.objects == b.objects


def test_single_object_caption(spec):
    s = generate(spec, 0, k=1)
    words = spec.vocabulary().decode(s.caption_tokens)
    assert len(s.objects) == 1
    obj = s.objects[0]
    assert sum(w in spec.colors for w in words) == 1 and sum(w in spec.shapes for w in words) == 1
    assert words[obj.span[0]:obj.span[1]] == [obj.color, obj.shape]


def test_census_covers_every_pair():
    spec = SplitSpec(seed=0, n_train=1000)
    seen = set()
    for i in range(1000):
        seen.update((o.color, o.shape) for o in generate(spec, i).objects)
    assert seen == set(itertools.product(spec.colors, spec.shapes))


def test_too_many_objects_is_config_error():
    spec = SplitSpec(colors=("red", "blue"), max_objects=3)
    with pytest.raises(ConfigError):
        generate(spec, 0)


def test_index_bounds(spec):
    with pytest.raises(InputError):
        generate(spec, spec.n_train)


@pytest.mark.parametrize("index", range(40))
def test_painted_pixels_inside_boxes(spec, index):
    s = generate(spec, index)
    R = spec.raster
    painted = s.raster.any(axis=-1)
    covered = np.zeros_like(painted)
    for o in s.objects:
        cx, cy, w, h = o.box
        x0, x1 = round((cx - w / 2) * R), round((cx + w / 2) * R)
        y0, y1 = round((cy - h / 2) * R), round((cy + h / 2) * R)
        assert 0 <= x0 < x1 <= R and 0 <= y0 < y1 <= R
        covered[y0:y1, x0:x1] = True
        region = s.raster[y0:y1, x0:x1]
        # tight box: every side of the box touches paint
        mask = region.any(-1)
        assert mask[0].any() and mask[-1].any() and mask[:, 0].any() and mask[:, -1].any()
    assert not np.any(painted & ~covered)


@pytest.mark.parametrize("index", range(40))
def test_spans_name_their_object(spec, index):
    s = generate(spec, index)
    words = spec.vocabulary().decode(s.caption_tokens)
    for o in s.objects:
        assert words[o.span[0]:o.span[1]] == [o.color, o.shape]


def test_relations_are_true(spec):
    vocab = spec.vocabulary()
    checked = 0
    for i in range(100):
        s = generate(spec, i)
        words = vocab.decode(s.caption_tokens)
        by_start = {o.span[0]: o for o in s.objects}
        for j, w in enumerate(words):
            if w in ("left", "right", "above", "below"):
                before = max(st for st in by_start if st < j)
                after = min(st for st in by_start if st > j)
                a, b = by_start[before], by_start[after]
                if w == "left":
                    assert a.box[0] + a.box[2] / 2 <= b.box[0] - b.box[2] / 2
                if w == "above":
                    assert a.box[1] + a.box[3] / 2 <= b.box[1] - b.box[3] / 2
                checked += 1
    assert checked > 10


def test_train_val_disjoint(spec):
    train_ids = {generate(spec, i, "train").scene_id for i in range(spec.n_train)}
    val_ids = {generate(spec, i, "val").scene_id for i in range(spec.n_val)}
    assert not train_ids & val_ids
    assert generate(spec, 0, "train").raster.tobytes() != generate(spec, 0, "val").raster.tobytes()


def test_shape_masks_fill_their_square():
    for shape in ("circle", "square", "triangle", "cross"):
        for s in range(2, 9):
            m = shape_mask(shape, s)
            assert m[0].any() and m[-1].any() and m[:, 0].any() and m[:, -1].any()


class TestDistractors:
    def test_present_objects_unchanged(self, spec):
        s = generate(spec, 0, k=1)
        d = distractor_caption(s, np.random.default_rng(1), spec)
        assert [(o.box, o.color, o.shape) for o in d.objects] == [(o.box, o.color, o.shape) for o in s.objects]
        words = spec.vocabulary().decode(d.caption_tokens)
        (absent,) = d.absent_spans
        assert tuple(words[absent[0]:absent[1]]) not in {(o.color, o.shape) for o in s.objects}
        o = d.objects[0]
        assert words[o.span[0]:o.span[1]] == [o.color, o.shape]

    def test_all_absent_means_no_ground_truth(self, spec):
        s = generate(spec, 3)
        d = distractor_caption(s, np.random.default_rng(2), spec, n_absent=2, keep_present=False)
        gt = GroundTruth.from_scene(d)
        assert len(gt) == 0 and len(d.absent_spans) == 2

    def test_round_trip_through_file(self, spec, tmp_path):
        scenes = [distractor_caption(generate(spec, i), np.random.default_rng(i), spec) for i in range(5)]
        path = tmp_path / "scenes.jsonl"
        write_scenes(path, scenes, spec)
        back, header = read_scenes(path)
        assert header["version"] == 1
        assert SplitSpec.from_dict(header["split_spec"]) == spec
        for a, b in zip(scenes, back):
            assert a.scene_id == b.scene_id and a.caption_tokens == b.caption_tokens
            assert a.raster.tobytes() == b.raster.tobytes()
            assert a.objects == b.objects and a.absent_spans == b.absent_spans


def test_vocabulary_file_round_trip(tmp_path, spec):
    vocab = spec.vocabulary()
    vocab.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines == vocab.tokens
    again = Vocabulary.load(tmp_path / "vocab.txt")
    assert again.encode("a red circle") == [lines.index("a"), lines.index("red"), lines.index("circle")]
    with pytest.raises(InputError):
        vocab.encode("a purple circle")
