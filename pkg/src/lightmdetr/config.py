"""Run configuration.

A config file is a JSON object whose keys are the field names of
:class:`RunConfig`; the nested ``data`` object holds :class:`SplitSpec`
fields.  Unknown keys are rejected.  Example::

    {"variant": "light", "fusion": "add", "d_model": 64, "steps": 2000,
     "data": {"seed": 0, "n_train": 256}}
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import ConfigError, SplitSpec

VARIANTS = ("light", "plus", "full_train")
FUSIONS = ("add", "mul", "concat", "cross_attention")
POS_MODES = ("head", "up")
SCHEDULES = ("constant", "cosine")


@dataclass
class RunConfig:
    variant: str = "light"
    fusion: str = "add"
    # frozen stub backbones
    patch: int = 2
    d_backbone_img: int = 32
    img_hidden: int = 32
    d_backbone_txt: int = 48
    text_layers: int = 1
    text_heads: int = 4
    text_ffn: int = 96
    vocab_size: int | None = None  # None: size of the data vocabulary
    # shared space, UP and Plus layers
    d_model: int = 64
    d_ffn: int = 256
    up_layers: int = 4
    up_heads: int = 4
    cross_fusion_heads: int = 1
    plus_ffn: int | None = None  # None: d_ffn
    train_shared_projections: bool = True
    pos_embed: str = "head"
    # detection head
    num_queries: int = 16
    max_tokens: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    head_heads: int = 4
    head_ffn: int = 256
    d_contrastive: int | None = None  # None: d_model
    aux_loss: bool = False
    # loss
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_tok: float = 1.0
    w_con: float = 1.0
    temperature: float = 0.07
    # optimization
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"  # or "cosine" (decay to zero over the run)
    warmup_steps: int = 0
    grad_clip: float | None = None  # max global gradient norm
    steps: int = 2000
    epochs: int | None = None  # when set, overrides steps
    batch_size: int = 8
    seed: int = 0
    log_every: int = 50
    data: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = SplitSpec.from_dict(self.data)
        self.validate()

    # derived widths ---------------------------------------------------------
    @property
    def raw_patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def grid(self) -> tuple[int, int]:
        n = self.data.raster // self.patch
        return n, n

    @property
    def n_img(self) -> int:
        r, c = self.grid
        return r * c

    @property
    def vocab(self) -> int:
        return self.vocab_size if self.vocab_size is not None else len(self.data.vocabulary())

    @property
    def contrastive_width(self) -> int:
        return self.d_contrastive or self.d_model

    @property
    def plus_ffn_width(self) -> int:
        return self.plus_ffn or self.d_ffn

    @property
    def steps_per_epoch(self) -> int:
        return -(-self.data.n_train // self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch if self.epochs is not None else self.steps

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.pos_embed not in POS_MODES:
            raise ConfigError(f"pos_embed must be one of {POS_MODES}, got {self.pos_embed!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        if self.lr <= 0 or self.warmup_steps < 0 or (self.grad_clip is not None and self.grad_clip <= 0):
            raise ConfigError("lr and grad_clip must be positive, warmup_steps non-negative")
        if self.data.raster % self.patch:
            raise ConfigError(f"raster {self.data.raster} is not a multiple of patch {self.patch}")
        for name, width, heads in (("d_model", self.d_model, self.up_heads),
                                   ("d_model", self.d_model, self.head_heads),
                                   ("d_model", self.d_model, self.cross_fusion_heads),
                                   ("d_backbone_txt", self.d_backbone_txt, self.text_heads)):
            if heads < 1 or width % heads:
                raise ConfigError(f"{name}={width} is not divisible by {heads} heads")
        if self.num_queries < self.data.max_objects:
            raise ConfigError("num_queries must be at least the maximum number of objects per scene")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.vocab < len(self.data.vocabulary()):
            raise ConfigError("vocab_size is smaller than the data vocabulary")

    # serialization --------------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = self.data.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "data" in d:
            data_known = {f.name for f in fields(SplitSpec)}
            bad = set(d["data"]) - data_known
            if bad:
                raise ConfigError(f"unknown data keys: {sorted(bad)}")
            d["data"] = SplitSpec.from_dict(d["data"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


def tiny_config(**overrides) -> RunConfig:
    """Small enough for exhaustive finite-difference checks."""
    base = dict(
        patch=4, d_backbone_img=6, img_hidden=8, d_backbone_txt=10, text_heads=2, text_ffn=12,
        d_model=8, d_ffn=12, up_layers=2, up_heads=2, plus_ffn=10, num_queries=4, max_tokens=16,
        enc_layers=1, dec_layers=1, head_heads=2, head_ffn=12, d_contrastive=6, batch_size=2,
        data=SplitSpec(n_train=4, n_val=2, raster=8, min_size=2, max_size=4, max_objects=2),
    )
    base.update(overrides)
    return RunConfig(**base)


def paper_scale_config(variant: str = "light") -> RunConfig:
    """Paper-scale widths; only meaningful for parameter accounting."""
    return RunConfig(
        variant=variant, patch=32, d_backbone_img=2048, img_hidden=2048,
        d_backbone_txt=768, text_layers=12, text_heads=12, text_ffn=3072, vocab_size=50265,
        d_model=256, d_ffn=1024, up_layers=4, up_heads=4, num_queries=100, max_tokens=256,
        enc_layers=6, dec_layers=6, head_heads=8, head_ffn=2048, d_contrastive=64,
        data=SplitSpec(raster=64),
    )
