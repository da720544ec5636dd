"""Parameter accounting by group.

Groups: ``head`` is every ``head.*`` tensor; everything else (stub
backbones, shared projections, modality tokens, UP, Plus layers) is
"backbone", split by the trainable flag.
"""
from __future__ import annotations

from dataclasses import dataclass

from .config import RunConfig
from .model import build_registry


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    count: int
    trainable: bool


@dataclass
class ParamReport:
    entries: list[ParamEntry]
    trainable_backbone: int
    frozen_backbone: int
    head: int
    grand_total: int

    @property
    def trainable_total(self) -> int:
        return sum(e.count for e in self.entries if e.trainable)

    def table(self) -> str:
        rows = [f"{e.name}\t{'x'.join(map(str, e.shape))}\t{e.count}\t{'trainable' if e.trainable else 'frozen'}"
                for e in self.entries]
        rows += [f"trainable_backbone\t\t{self.trainable_backbone}",
                 f"frozen_backbone\t\t{self.frozen_backbone}",
                 f"head\t\t{self.head}",
                 f"grand_total\t\t{self.grand_total}"]
        return "\n".join(rows)


def is_head(name: str) -> bool:
    return name.startswith("head.")


def count_params(cfg: RunConfig) -> ParamReport:
    reg = build_registry(cfg, shapes_only=True)
    entries = [ParamEntry(n, tuple(e.tensor.shape), e.count, e.trainable) for n, e in reg.items()]
    head = sum(e.count for e in entries if is_head(e.name))
    tb = sum(e.count for e in entries if not is_head(e.name) and e.trainable)
    fb = sum(e.count for e in entries if not is_head(e.name) and not e.trainable)
    return ParamReport(entries, tb, fb, head, head + tb + fb)


def backbone_fraction(light: ParamReport, baseline: ParamReport) -> float:
    """Trainable-backbone parameters of ``light`` relative to ``baseline``."""
    return light.trainable_backbone / baseline.trainable_backbone
