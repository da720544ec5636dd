"""Synthetic modulated-detection scenes: colored shapes plus captions naming them.

Dataset file format (``lightmdetr.scenes``, version 1) is line-delimited
JSON.  The first line is a header::

    {"format": "lightmdetr.scenes", "version": 1, "raster_shape": [H, W, 3],
     "vocabulary": [...], "split_spec": {...}}

Each following line is one scene::

    {"scene_id": "train-00000", "caption_tokens": [...],
     "raster": [[[r, g, b], ...], ...],            # integers 0..255
     "objects": [{"box": [cx, cy, w, h], "span": [start, end] | null,
                  "color": "red", "shape": "circle"}, ...],
     "absent_spans": [[start, end], ...]}

Spans are half-open token index ranges.  ``absent_spans`` mark phrases that
name objects missing from the image; they ground to nothing.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_NAME = "lightmdetr.scenes"
FORMAT_VERSION = 1

DEFAULT_COLORS = ("red", "green", "blue", "yellow")
DEFAULT_SHAPES = ("circle", "square", "triangle", "cross")
RGB = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 240),
    "yellow": (240, 220, 40),
    "magenta": (220, 50, 220),
    "cyan": (40, 220, 220),
    "white": (250, 250, 250),
    "orange": (250, 140, 20),
}
FUNCTION_WORDS = ("a", "and", "left", "right", "of", "above", "below")
RELATIONS = {"left": ["left", "of"], "right": ["right", "of"], "above": ["above"], "below": ["below"]}


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class Vocabulary:
    """Whitespace tokenizer over a fixed word list; token id = list position."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[w] for w in text.split()]
        except KeyError as exc:
            raise InputError(f"word {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(line for line in Path(path).read_text().splitlines() if line)


@dataclass
class SplitSpec:
    seed: int = 0
    n_train: int = 256
    n_val: int = 64
    colors: tuple = DEFAULT_COLORS
    shapes: tuple = DEFAULT_SHAPES
    raster: int = 16
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 4
    max_size: int = 7
    distinct_colors: bool = True
    relations: bool = True
    distractor_prob: float = 0.0

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(list(FUNCTION_WORDS) + list(self.colors) + list(self.shapes))

    def size(self, split: str) -> int:
        if split == "train":
            return self.n_train
        if split == "val":
            return self.n_val
        raise ConfigError(f"unknown split {split!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["colors"] = list(self.colors)
        d["shapes"] = list(self.shapes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        d = dict(d)
        for key in ("colors", "shapes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SceneObject:
    box: tuple  # normalized (cx, cy, w, h)
    span: tuple | None  # half-open token range, None when the caption omits it
    color: str
    shape: str


@dataclass
class Scene:
    scene_id: str
    raster: np.ndarray  # (H, W, 3) uint8
    caption_tokens: list
    objects: list
    absent_spans: list = field(default_factory=list)

    def referenced(self) -> list[SceneObject]:
        return [o for o in self.objects if o.span is not None]

    def gt_boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.referenced()], dtype=np.float64).reshape(-1, 4)

    def gt_spans(self) -> list[list[int]]:
        return [list(range(*o.span)) for o in self.referenced()]


# -- rendering ------------------------------------------------------------------
def shape_mask(shape: str, s: int) -> np.ndarray:
    """Boolean s x s mask; every shape touches all four sides of its square."""
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (s / 2.0) ** 2
    if shape == "triangle":
        half = (yy + 1) / s * (s / 2.0)
        return np.abs(xx - c) <= half
    if shape == "cross":
        t = max(1, s // 3)
        lo = (s - t) // 2
        band = (xx >= lo) & (xx < lo + t)
        return band | ((yy >= lo) & (yy < lo + t))
    raise ConfigError(f"unknown shape {shape!r}")


def _place(rng: np.random.Generator, sizes: list[int], raster: int) -> list[tuple[int, int]] | None:
    boxes: list[tuple[int, int, int]] = []
    for s in sizes:
        for _ in range(200):
            x0 = int(rng.integers(0, raster - s + 1))
            y0 = int(rng.integers(0, raster - s + 1))
            if all(x0 + s <= bx or bx + bs <= x0 or y0 + s <= by or by + bs <= y0 for bx, by, bs in boxes):
                boxes.append((x0, y0, s))
                break
        else:
            return None
    return [(x, y) for x, y, _ in boxes]


def _relation(a: SceneObject, b: SceneObject, rng: np.random.Generator) -> str | None:
    options = []
    ax, ay = a.box[:2]
    bx, by = b.box[:2]
    if ax + a.box[2] / 2 <= bx - b.box[2] / 2:
        options.append("left")
    if bx + b.box[2] / 2 <= ax - a.box[2] / 2:
        options.append("right")
    if ay + a.box[3] / 2 <= by - b.box[3] / 2:
        options.append("above")
    if by + b.box[3] / 2 <= ay - a.box[3] / 2:
        options.append("below")
    if not options:
        return None
    return options[int(rng.integers(len(options)))]


def _split_code(split: str) -> int:
    return {"train": 0, "val": 1}[split]


def generate(spec: SplitSpec, index: int, split: str = "train", k: int | None = None) -> Scene:
    """Scene ``index`` of ``split``; a pure function of (spec, split, index)."""
    if not 0 <= index < spec.size(split):
        raise InputError(f"index {index} outside split {split!r} of size {spec.size(split)}")
    n_pairs = len(spec.colors) * len(spec.shapes)
    top = spec.max_objects if k is None else k
    if top > (len(spec.colors) if spec.distinct_colors else n_pairs):
        raise ConfigError(f"vocabulary too small for {top} distinct objects")
    rng = np.random.default_rng([spec.seed, _split_code(split), index])
    if k is None:
        k = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    if spec.distinct_colors:
        colors = [spec.colors[i] for i in rng.permutation(len(spec.colors))[:k]]
        shapes = [spec.shapes[int(rng.integers(len(spec.shapes)))] for _ in range(k)]
    else:
        picks = rng.permutation(n_pairs)[:k]
        colors = [spec.colors[p // len(spec.shapes)] for p in picks]
        shapes = [spec.shapes[p % len(spec.shapes)] for p in picks]

    while True:
        sizes = [int(rng.integers(spec.min_size, spec.max_size + 1)) for _ in range(k)]
        corners = _place(rng, sizes, spec.raster)
        if corners is not None:
            break

    R = spec.raster
    raster = np.zeros((R, R, 3), dtype=np.uint8)
    objects = []
    for (x0, y0), s, color, shape in zip(corners, sizes, colors, shapes):
        m = shape_mask(shape, s)
        patch = raster[y0:y0 + s, x0:x0 + s]
        patch[m] = RGB[color]
        box = ((x0 + s / 2) / R, (y0 + s / 2) / R, s / R, s / R)
        objects.append(SceneObject(box=box, span=None, color=color, shape=shape))

    vocab = spec.vocabulary()
    words: list[str] = []
    order = [int(i) for i in rng.permutation(k)]
    for pos, i in enumerate(order):
        if pos > 0:
            rel = None
            if spec.relations and rng.random() < 0.5:
                rel = _relation(objects[order[pos - 1]], objects[i], rng)
            words.extend(RELATIONS[rel] if rel else ["and"])
        words.append("a")
        start = len(words)
        words.extend([objects[i].color, objects[i].shape])
        objects[i].span = (start, start + 2)
    scene = Scene(scene_id=f"{split}-{index:05d}", raster=raster,
                  caption_tokens=vocab.encode(" ".join(words)), objects=objects)
    if spec.distractor_prob > 0 and rng.random() < spec.distractor_prob:
        scene = distractor_caption(scene, rng, spec)
    return scene


def distractor_caption(scene: Scene, rng: np.random.Generator, spec: SplitSpec,
                       n_absent: int = 1, keep_present: bool = True) -> Scene:
    """Rewrite the caption so it also names objects that are not in the image.

    Absent phrases carry no ground-truth box; their token ranges are listed in
    ``absent_spans``.  With ``keep_present=False`` the caption names only
    absent objects and the scene has no referenced ground truth.
    """
    vocab = spec.vocabulary()
    present = {(o.color, o.shape) for o in scene.objects}
    unused = [(c, s) for c in spec.colors for s in spec.shapes if (c, s) not in present]
    if len(unused) < n_absent:
        raise ConfigError("vocabulary has too few unused color/shape pairs")
    absent = [unused[i] for i in rng.permutation(len(unused))[:n_absent]]

    phrases = [("present", o) for o in scene.objects if keep_present and o.span is not None]
    phrases.sort(key=lambda p: p[1].span[0])
    for pair in absent:
        phrases.insert(int(rng.integers(len(phrases) + 1)), ("absent", pair))

    words: list[str] = []
    new_objects = [SceneObject(o.box, None, o.color, o.shape) for o in scene.objects]
    lookup = {id(o): n for o, n in zip(scene.objects, new_objects)}
    absent_spans = []
    for pos, (kind, item) in enumerate(phrases):
        if pos > 0:
            words.append("and")
        words.append("a")
        start = len(words)
        color, shape = (item.color, item.shape) if kind == "present" else item
        words.extend([color, shape])
        if kind == "present":
            lookup[id(item)].span = (start, start + 2)
        else:
            absent_spans.append((start, start + 2))
    return Scene(scene.scene_id, scene.raster.copy(), vocab.encode(" ".join(words)), new_objects, absent_spans)


def generate_split(spec: SplitSpec, split: str = "train") -> list[Scene]:
    return [generate(spec, i, split) for i in range(spec.size(split))]


# -- file format -----------------------------------------------------------------
def scene_to_record(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "caption_tokens": [int(t) for t in scene.caption_tokens],
        "raster": scene.raster.astype(int).tolist(),
        "objects": [
            {"box": [float(v) for v in o.box], "span": list(o.span) if o.span is not None else None,
             "color": o.color, "shape": o.shape}
            for o in scene.objects
        ],
        "absent_spans": [list(s) for s in scene.absent_spans],
    }


def scene_from_record(rec: dict) -> Scene:
    return Scene(
        scene_id=rec["scene_id"],
        raster=np.array(rec["raster"], dtype=np.uint8),
        caption_tokens=list(rec["caption_tokens"]),
        objects=[SceneObject(tuple(o["box"]), tuple(o["span"]) if o["span"] is not None else None,
                             o["color"], o["shape"]) for o in rec["objects"]],
        absent_spans=[tuple(s) for s in rec.get("absent_spans", [])],
    )


def write_scenes(path, scenes: list[Scene], spec: SplitSpec) -> None:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION,
              "raster_shape": [spec.raster, spec.raster, 3],
              "vocabulary": spec.vocabulary().tokens, "split_spec": spec.to_dict()}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in scenes:
            fh.write(json.dumps(scene_to_record(s)) + "\n")


def read_scenes(path) -> tuple[list[Scene], dict]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT_NAME:
            raise InputError(f"{path}: not a {FORMAT_NAME} file")
        if header.get("version") != FORMAT_VERSION:
            raise InputError(f"{path}: unsupported version {header.get('version')}")
        scenes = [scene_from_record(json.loads(line)) for line in fh if line.strip()]
    return scenes, header
