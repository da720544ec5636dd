"""Finite-difference verification of every trainable tensor's gradient.

The Hungarian assignment is computed once and held fixed, so the checked
function is the smooth (piecewise) total loss.  For each trainable tensor the
analytic gradient G is probed along one random unit direction and a few
sampled coordinates; each probe is compared with a Richardson-extrapolated
central difference whose step is ``h`` times the tensor's root-mean-square
value (``h`` itself for all-zero tensors).  The
reported error of a tensor is

    max over probes |analytic - numeric| / max(||G||, floor)

i.e. the discrepancy measured against the size of that tensor's gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig, tiny_config
from .data import generate_split
from .losses import LossWeights, match, total_loss
from .model import LightMDETR, collate

TOLERANCE = 1e-5
FAIL_TOLERANCE = 1e-4


@dataclass
class GradcheckRow:
    name: str
    shape: tuple[int, ...]
    grad_norm: float
    max_rel_error: float

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_error < tol


@dataclass
class GradcheckReport:
    rows: list[GradcheckRow]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.passed(self.tolerance) for r in self.rows)

    @property
    def failures(self) -> list[str]:
        return [r.name for r in self.rows if not r.passed(self.tolerance)]

    @property
    def worst(self) -> float:
        return max((r.max_rel_error for r in self.rows), default=0.0)

    def table(self) -> str:
        lines = ["tensor\tshape\tgrad_norm\tmax_rel_error\tstatus"]
        for r in self.rows:
            status = "ok" if r.passed(self.tolerance) else "FAIL"
            lines.append(f"{r.name}\t{'x'.join(map(str, r.shape))}\t{r.grad_norm:.3e}\t{r.max_rel_error:.3e}\t{status}")
        return "\n".join(lines)


def gradcheck(cfg: RunConfig | None = None, n_coords: int = 4, h: float = 1e-5,
              floor: float = 1e-10, tolerance: float = TOLERANCE, seed: int = 0) -> GradcheckReport:
    cfg = cfg or tiny_config()
    if cfg.d_model > 16:
        raise ValueError("gradcheck is meant for tiny configs (d_model <= 16)")
    model = LightMDETR(cfg)
    reg = model.registry
    scenes = generate_split(cfg.data, "train")[: cfg.batch_size]
    batch = collate(scenes)
    weights = LossWeights(cfg.w_l1, cfg.w_giou, cfg.w_tok, cfg.w_con)
    assignments = match(model(batch), batch.targets, weights)

    def loss() -> float:
        return total_loss(model(batch), batch.targets, weights, cfg.temperature, assignments).total_value

    reg.zero_grad()
    report = total_loss(model(batch), batch.targets, weights, cfg.temperature, assignments)
    report.total.backward()
    rng = np.random.default_rng(seed)
    rows = []
    for name, param in reg.trainable():
        G = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
        probes = []
        v = rng.normal(size=param.shape)
        probes.append(v / np.linalg.norm(v))
        for flat in rng.choice(param.data.size, size=min(n_coords, param.data.size), replace=False):
            e = np.zeros(param.data.size)
            e[flat] = 1.0
            probes.append(e.reshape(param.shape))
        original = param.data
        # step proportional to the tensor's magnitude (small modality tokens
        # under "mul" fusion sit in a region of high curvature)
        rms = float(np.sqrt(np.mean(original ** 2)))
        step = h * (rms if rms > 0 else 1.0)

        def central(d, s):
            param.data = original + s * d
            up = loss()
            param.data = original - s * d
            down = loss()
            param.data = original
            return (up - down) / (2 * s)

        err = 0.0
        for d in probes:
            # Richardson extrapolation cancels the O(step^2) truncation term
            numeric = (4 * central(d, step / 2) - central(d, step)) / 3
            err = max(err, abs(float(np.sum(G * d)) - numeric))
        norm = float(np.linalg.norm(G))
        rows.append(GradcheckRow(name, tuple(param.shape), norm, err / max(norm, floor)))
    return GradcheckReport(rows, tolerance)
