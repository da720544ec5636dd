"""Phrase-grounding metrics and the prediction dump.

For every phrase that names an object in the image, the Q predicted boxes are
ranked by the probability mass their token distribution puts on the phrase's
span.  A phrase counts as recalled at k when one of the top-k boxes overlaps
the ground truth with IoU >= 0.5.

Prediction dump format (``lightmdetr.predictions``, version 1): line-delimited
JSON whose first line is a header, followed by one record per query::

    {"format": "lightmdetr.predictions", "version": 1, "num_queries": Q}
    {"scene_id": "val-00003", "query_index": 0, "box": [cx, cy, w, h],
     "confidence": 0.93, "token_distribution": [p_0, ..., p_L, p_none]}
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Scene, generate_split
from .losses import box_iou
from .model import LightMDETR, collate
from .tensor import no_grad

KS = (1, 5, 10)
IOU_THRESHOLDS = (0.5, 0.7, 0.9)
HIT_IOU = 0.5
PREDICTIONS_FORMAT = "lightmdetr.predictions"


@dataclass
class MetricsReport:
    recall: dict[int, float]
    precision: dict[int, float]
    mean_iou: float  # IoU of the top-ranked box, averaged over phrases
    pr_at: dict[float, float]  # fraction of phrases whose top box reaches each IoU
    n_phrases: int
    random_recall: dict[int, float] = field(default_factory=dict)
    loss_curve: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("loss_curve")
        return d

    def table(self) -> str:
        lines = [f"phrases\t{self.n_phrases}"]
        lines += [f"recall@{k}\t{self.recall[k]:.4f}" for k in self.recall]
        lines += [f"precision@{k}\t{self.precision[k]:.4f}" for k in self.precision]
        lines.append(f"mean_iou@1\t{self.mean_iou:.4f}")
        lines += [f"pr@{t}\t{self.pr_at[t]:.4f}" for t in self.pr_at]
        lines += [f"random_recall@{k}\t{self.random_recall[k]:.4f}" for k in self.random_recall]
        return "\n".join(lines)


@dataclass
class ScenePredictions:
    scene: Scene
    boxes: np.ndarray  # (Q, 4)
    probs: np.ndarray  # (Q, L+1), last column is no-object

    @property
    def confidence(self) -> np.ndarray:
        return 1.0 - self.probs[:, -1]


def rank_queries(probs: np.ndarray, span, confidence_threshold: float | None = None) -> np.ndarray:
    """Query indices ordered by phrase score (stable on ties), optionally filtered."""
    start, end = span
    score = probs[:, start:end].sum(axis=-1)
    order = np.argsort(-score, kind="stable")
    if confidence_threshold is not None:
        keep = (1.0 - probs[:, -1]) >= confidence_threshold
        order = order[keep[order]]
    return order


def random_ranking_recall(n_good: int, n_queries: int, k: int) -> float:
    """Chance that a uniformly random ranking puts one of ``n_good`` boxes in its top k."""
    k = min(k, n_queries)
    return 1.0 - comb(n_queries - n_good, k) / comb(n_queries, k)


def compute_metrics(preds: list[ScenePredictions], ks=KS,
                    confidence_threshold: float | None = None) -> MetricsReport:
    hits = {k: [] for k in ks}
    prec = {k: [] for k in ks}
    rand = {k: [] for k in ks}
    top_iou = []
    for p in preds:
        Q = p.boxes.shape[0]
        for obj in p.scene.referenced():
            ious = box_iou(p.boxes, np.asarray(obj.box))[:, 0]
            good = ious >= HIT_IOU
            order = rank_queries(p.probs, obj.span, confidence_threshold)
            top_iou.append(float(ious[order[0]]) if len(order) else 0.0)
            for k in ks:
                top = order[:k]
                hits[k].append(bool(good[top].any()))
                prec[k].append(float(good[top].sum()) / k)
                rand[k].append(random_ranking_recall(int(good.sum()), Q, k))
    n = len(top_iou)

    def mean(v):
        return float(np.mean(v)) if v else 0.0

    top = np.array(top_iou)
    return MetricsReport(
        recall={k: mean(hits[k]) for k in ks},
        precision={k: mean(prec[k]) for k in ks},
        mean_iou=mean(top_iou),
        pr_at={t: float(np.mean(top >= t)) if n else 0.0 for t in IOU_THRESHOLDS},
        n_phrases=n,
        random_recall={k: mean(rand[k]) for k in ks},
    )


def predict(model: LightMDETR, scenes: list[Scene], batch_size: int = 32,
            workers: int = 1) -> list[ScenePredictions]:
    """Run the model over ``scenes`` without recording gradients.

    Batches are independent and the model is only read, so ``workers > 1``
    evaluates them on a thread pool.
    """
    chunks = [scenes[i:i + batch_size] for i in range(0, len(scenes), batch_size)]

    def run(chunk):
        with no_grad():
            out = model(collate(chunk))
        probs = out.token_probs()
        return [ScenePredictions(s, out.boxes.data[j].copy(), probs[j]) for j, s in enumerate(chunk)]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    return [p for chunk in results for p in chunk]


def write_predictions(path, preds: list[ScenePredictions]) -> None:
    Q = preds[0].boxes.shape[0] if preds else 0
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": PREDICTIONS_FORMAT, "version": 1, "num_queries": Q}) + "\n")
        for p in preds:
            conf = p.confidence
            for q in range(p.boxes.shape[0]):
                fh.write(json.dumps({
                    "scene_id": p.scene.scene_id, "query_index": q,
                    "box": [float(v) for v in p.boxes[q]], "confidence": float(conf[q]),
                    "token_distribution": [float(v) for v in p.probs[q]],
                }) + "\n")


def evaluate_model(model: LightMDETR, split: str = "val", scenes: list[Scene] | None = None,
                   confidence_threshold: float | None = None, dump_path=None,
                   workers: int = 1) -> MetricsReport:
    scenes = scenes if scenes is not None else generate_split(model.cfg.data, split)
    preds = predict(model, scenes, workers=workers)
    if dump_path is not None:
        write_predictions(dump_path, preds)
    return compute_metrics(preds, confidence_threshold=confidence_threshold)


def evaluate(checkpoint, split: str = "val", cfg: RunConfig | None = None,
             confidence_threshold: float | None = None, dump_path=None,
             workers: int = 1) -> MetricsReport:
    """Metrics of the model stored in ``checkpoint`` on a synthetic split.

    When ``cfg`` is given the checkpoint is loaded against it and any
    mismatch raises :class:`lightmdetr.params.CheckpointError`.
    """
    from .train import LOSS_LOG, load_checkpoint, read_loss_log

    model, _, _ = load_checkpoint(checkpoint, cfg)
    report = evaluate_model(model, split, confidence_threshold=confidence_threshold,
                            dump_path=dump_path, workers=workers)
    log_path = Path(checkpoint).parent / LOSS_LOG
    if log_path.exists():
        report.loss_curve = read_loss_log(log_path)
    return report
