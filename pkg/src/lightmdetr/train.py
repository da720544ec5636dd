"""Training loop with resumable checkpoints, a per-step loss log and a freeze audit.

Output directory layout::

    checkpoint.bin   model tensors + Adam moments (``optim/m/*``, ``optim/v/*``)
    loss.tsv         one row per step: step, lr, and every loss term
    config.json      the run configuration

The loss log is tab-separated with a header row.  Columns after ``lr`` follow
:meth:`lightmdetr.losses.LossReport.as_dict`.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Scene, generate_split, scene_to_record
from .losses import LossWeights, total_loss
from .model import LightMDETR, build_registry, collate
from .params import OPTIM_PREFIX, Adam, ParamRegistry, load_into_registry, save_registry

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.bin"
LOSS_LOG = "loss.tsv"
LOSS_COLUMNS = ("l1", "giou", "soft_token", "contrastive_o", "contrastive_t", "contrastive", "total")


class NonFiniteLossError(RuntimeError):
    """Raised when a step produces a NaN/Inf loss; ``dump_path`` holds the batch."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class FreezeViolation(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: LightMDETR
    curve: list[dict] = field(default_factory=list)  # one dict per step, from step 1
    optimizer: Adam | None = None
    checkpoint: Path | None = None
    audits: int = 0

    @property
    def totals(self) -> np.ndarray:
        return np.array([row["total"] for row in self.curve])


def learning_rate(cfg: RunConfig, step: int) -> float:
    """Learning rate for 0-based ``step``: linear warmup, then constant or cosine decay."""
    scale = 1.0
    if cfg.warmup_steps:
        scale = min(1.0, (step + 1) / cfg.warmup_steps)
    if cfg.lr_schedule == "cosine":
        scale *= 0.5 * (1.0 + math.cos(math.pi * step / max(cfg.total_steps, 1)))
    return cfg.lr * scale


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Scene order for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(cfg: RunConfig, step: int) -> np.ndarray:
    n = cfg.data.n_train
    epoch, k = divmod(step, cfg.steps_per_epoch)
    order = epoch_order(cfg.seed, epoch, n)
    return order[k * cfg.batch_size:(k + 1) * cfg.batch_size]


def clip_gradients(registry: ParamRegistry, max_norm: float) -> float:
    grads = [t.grad for _, t in registry.trainable() if t.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def frozen_fingerprint(registry: ParamRegistry) -> dict[str, str]:
    return registry.fingerprint([name for name, _ in registry.frozen()])


def audit_frozen(registry: ParamRegistry, reference: dict[str, str]) -> None:
    current = frozen_fingerprint(registry)
    drifted = [n for n in reference if current.get(n) != reference[n]]
    if drifted or set(current) != set(reference):
        raise FreezeViolation(f"frozen tensors changed during training: {drifted[:5]}")


def save_checkpoint(path, model: LightMDETR, optimizer: Adam, step: int) -> None:
    extra = []
    for name in optimizer.m:
        extra.append((f"{OPTIM_PREFIX}m/{name}", optimizer.m[name], False))
        extra.append((f"{OPTIM_PREFIX}v/{name}", optimizer.v[name], False))
    meta = {"config": model.cfg.to_dict(), "step": step, "optimizer_step": optimizer.step_index}
    save_registry(path, model.registry, meta, extra)


def load_checkpoint(path, cfg: RunConfig | None = None) -> tuple[LightMDETR, Adam, int]:
    """Rebuild the model (and optimizer state) stored at ``path``.

    With ``cfg`` given, the checkpoint must match its architecture; otherwise
    the configuration recorded in the checkpoint is used.
    """
    from .params import load_archive

    if cfg is None:
        _, meta = load_archive(path)
        cfg = RunConfig.from_dict(meta["config"])
    model = LightMDETR(cfg)
    meta, extra = load_into_registry(path, model.registry)
    opt = Adam(lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
               step_index=int(meta.get("optimizer_step", 0)))
    for key, arr in extra.items():
        kind, name = key[len(OPTIM_PREFIX):].split("/", 1)
        (opt.m if kind == "m" else opt.v)[name] = arr.copy()
    return model, opt, int(meta.get("step", 0))


def _dump_batch(out_dir: Path | None, step: int, scenes: list[Scene], report: dict) -> Path | None:
    if out_dir is None:
        return None
    path = out_dir / f"nonfinite_step{step}.json"
    path.write_text(json.dumps({"step": step, "losses": report,
                                "scenes": [scene_to_record(s) for s in scenes]}))
    return path


def _write_log_header(path: Path) -> None:
    path.write_text("\t".join(("step", "lr") + LOSS_COLUMNS) + "\n")


def _truncate_log(path: Path, step: int) -> list[dict]:
    """Keep rows up to ``step`` (for resume) and return them as curve entries."""
    if not path.exists():
        _write_log_header(path)
        return []
    lines = path.read_text().splitlines()
    header, rows = lines[0], [ln.split("\t") for ln in lines[1:] if ln]
    rows = [r for r in rows if int(r[0]) <= step]
    path.write_text("\n".join([header] + ["\t".join(r) for r in rows]) + "\n")
    return [dict(zip(LOSS_COLUMNS, map(float, r[2:]))) for r in rows]


def train(cfg: RunConfig, out_dir=None, resume: bool = False, model: LightMDETR | None = None,
          scenes: list[Scene] | None = None, stop_after: int | None = None) -> TrainResult:
    """Train for ``cfg.total_steps`` steps (or until ``stop_after`` steps are done).

    With ``out_dir`` set, the loss log is written as training proceeds and a
    checkpoint is saved at the end; ``resume=True`` continues from the
    checkpoint found there.  The frozen tensors are audited after every epoch
    and at the end of the run.
    """
    out = Path(out_dir) if out_dir is not None else None
    start = 0
    optimizer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        if resume and (out / CHECKPOINT).exists():
            model, optimizer, start = load_checkpoint(out / CHECKPOINT, cfg)
            log.info("resuming from step %d", start)
    if model is None:
        model = LightMDETR(cfg)
    if optimizer is None:
        optimizer = Adam(lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    scenes = scenes if scenes is not None else generate_split(cfg.data, "train")
    if len(scenes) != cfg.data.n_train:
        raise ValueError(f"expected {cfg.data.n_train} training scenes, got {len(scenes)}")

    curve = _truncate_log(out / LOSS_LOG, start) if out is not None else []
    weights = LossWeights(cfg.w_l1, cfg.w_giou, cfg.w_tok, cfg.w_con)
    reg = model.registry
    # after a resume the reference is a freshly initialized registry
    reference = frozen_fingerprint(build_registry(cfg) if start else reg)
    audits = 0
    end = cfg.total_steps if stop_after is None else min(cfg.total_steps, start + stop_after)
    log_fh = open(out / LOSS_LOG, "a") if out is not None else None
    try:
        for step in range(start, end):
            batch_scenes = [scenes[i] for i in batch_indices(cfg, step)]
            batch = collate(batch_scenes)
            reg.zero_grad()
            pred = model(batch)
            if not (np.all(np.isfinite(pred.boxes.data)) and np.all(np.isfinite(pred.token_logits.data))):
                # matching is undefined on NaN costs, so stop before it
                dump = _dump_batch(out, step + 1, batch_scenes, {})
                raise NonFiniteLossError(f"non-finite predictions at step {step + 1}", dump)
            report = total_loss(pred, batch.targets, weights, cfg.temperature)
            row = report.as_dict()
            if not all(math.isfinite(v) for v in row.values()):
                dump = _dump_batch(out, step + 1, batch_scenes, row)
                raise NonFiniteLossError(f"non-finite loss at step {step + 1}: {row}", dump)
            report.total.backward()
            if cfg.grad_clip is not None:
                clip_gradients(reg, cfg.grad_clip)
            optimizer.lr = learning_rate(cfg, step)
            optimizer.step(reg)
            curve.append(row)
            if log_fh is not None:
                log_fh.write("\t".join([str(step + 1), repr(optimizer.lr)] + [repr(row[c]) for c in LOSS_COLUMNS]) + "\n")
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                log.info("step %d total %.4f", step + 1, row["total"])
            if (step + 1) % cfg.steps_per_epoch == 0:
                audit_frozen(reg, reference)
                audits += 1
    finally:
        if log_fh is not None:
            log_fh.close()
    audit_frozen(reg, reference)
    audits += 1
    ckpt = None
    if out is not None:
        ckpt = out / CHECKPOINT
        save_checkpoint(ckpt, model, optimizer, end)
    return TrainResult(model, curve, optimizer, ckpt, audits)


def read_loss_log(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split("\t")
    return [{c: (int(v) if c == "step" else float(v)) for c, v in zip(cols, ln.split("\t"))}
            for ln in lines[1:] if ln]
