"""Box, soft-token and contrastive losses, and the matched total."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import InputError
from .head import Predictions
from .matching import MatchAssignment, hungarian_match
from .nn import MASK_FILL
from .tensor import Tensor

TEMPERATURE = 0.07


@dataclass
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    tok: float = 1.0
    con: float = 1.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.l1, self.giou, self.tok, self.con)


@dataclass
class GroundTruth:
    boxes: np.ndarray  # (M, 4) normalized cx, cy, w, h
    spans: list[list[int]]  # token positions aligned with each object

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.spans = [sorted(int(p) for p in s) for s in self.spans]
        if len(self.spans) != len(self.boxes):
            raise InputError(f"{len(self.boxes)} boxes but {len(self.spans)} spans")
        if any(len(s) == 0 for s in self.spans):
            raise InputError("ground-truth spans must be non-empty")
        if len(self.boxes) and (np.any(self.boxes[:, 2:] <= 0) or np.any(self.boxes < 0) or np.any(self.boxes > 1)):
            raise InputError("ground-truth boxes must have positive size and lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.boxes)

    @classmethod
    def from_scene(cls, scene) -> "GroundTruth":
        return cls(scene.gt_boxes(), scene.gt_spans())


@dataclass
class ContrastiveResult:
    loss_o: Tensor
    loss_t: Tensor
    loss: Tensor
    empty: bool = False


@dataclass
class LossReport:
    l1: float
    giou: float
    soft_token: float
    contrastive_o: float
    contrastive_t: float
    contrastive: float
    total: Tensor
    weights: LossWeights
    assignments: list[MatchAssignment] = field(default_factory=list)
    empty: bool = False

    @property
    def total_value(self) -> float:
        return self.total.item()

    def recomputed_total(self) -> float:
        w = self.weights
        return w.l1 * self.l1 + w.giou * self.giou + w.tok * self.soft_token + w.con * self.contrastive

    def as_dict(self) -> dict:
        return {"l1": self.l1, "giou": self.giou, "soft_token": self.soft_token,
                "contrastive_o": self.contrastive_o, "contrastive_t": self.contrastive_t,
                "contrastive": self.contrastive, "total": self.total_value}


def _empty_scalar() -> Tensor:
    t = Tensor(np.array(0.0))
    t.name = "empty"
    return t


def is_empty(t: Tensor) -> bool:
    return t.name == "empty"


# -- boxes -----------------------------------------------------------------------
def box_cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def _corners(b: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def giou_loss(pred, gt, box_format: str = "cxcywh") -> Tensor:
    """1 - IoU + |C \\ (A u B)| / |C| elementwise over (..., 4) boxes."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if box_format == "xyxy":
        gw, gh = gt_arr[..., 2] - gt_arr[..., 0], gt_arr[..., 3] - gt_arr[..., 1]
        a = (pred[..., 0], pred[..., 1], pred[..., 2], pred[..., 3])
        g = Tensor(gt_arr) if not isinstance(gt, Tensor) else gt
        b = (g[..., 0], g[..., 1], g[..., 2], g[..., 3])
    elif box_format == "cxcywh":
        gw, gh = gt_arr[..., 2], gt_arr[..., 3]
        a = _corners(pred)
        b = _corners(gt if isinstance(gt, Tensor) else Tensor(gt_arr))
    else:
        raise ValueError(f"unknown box format {box_format!r}")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise InputError("ground-truth box has zero area")
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = T.clamp_min(T.minimum(ax1, bx1) - T.maximum(ax0, bx0), 0.0)
    ih = T.clamp_min(T.minimum(ay1, by1) - T.maximum(ay0, by0), 0.0)
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    cw = T.maximum(ax1, bx1) - T.minimum(ax0, bx0)
    ch = T.maximum(ay1, by1) - T.minimum(ay0, by0)
    area_c = cw * ch
    return 1.0 - inter / union + (area_c - union) / area_c


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) cxcywh boxes -> (N, M)."""
    ax = box_cxcywh_to_xyxy(np.asarray(a).reshape(-1, 4))[:, None, :]
    bx = box_cxcywh_to_xyxy(np.asarray(b).reshape(-1, 4))[None, :, :]
    iw = np.clip(np.minimum(ax[..., 2], bx[..., 2]) - np.maximum(ax[..., 0], bx[..., 0]), 0, None)
    ih = np.clip(np.minimum(ax[..., 3], bx[..., 3]) - np.maximum(ax[..., 1], bx[..., 1]), 0, None)
    inter = iw * ih
    area_a = (ax[..., 2] - ax[..., 0]) * (ax[..., 3] - ax[..., 1])
    area_b = (bx[..., 2] - bx[..., 0]) * (bx[..., 3] - bx[..., 1])
    return inter / (area_a + area_b - inter)


def giou_loss_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU loss of (N, 4) and (M, 4) cxcywh boxes -> (N, M)."""
    ax = box_cxcywh_to_xyxy(np.asarray(a).reshape(-1, 4))[:, None, :]
    bx = box_cxcywh_to_xyxy(np.asarray(b).reshape(-1, 4))[None, :, :]
    iw = np.clip(np.minimum(ax[..., 2], bx[..., 2]) - np.maximum(ax[..., 0], bx[..., 0]), 0, None)
    ih = np.clip(np.minimum(ax[..., 3], bx[..., 3]) - np.maximum(ax[..., 1], bx[..., 1]), 0, None)
    inter = iw * ih
    area_a = (ax[..., 2] - ax[..., 0]) * (ax[..., 3] - ax[..., 1])
    area_b = (bx[..., 2] - bx[..., 0]) * (bx[..., 3] - bx[..., 1])
    union = area_a + area_b - inter
    cw = np.maximum(ax[..., 2], bx[..., 2]) - np.minimum(ax[..., 0], bx[..., 0])
    ch = np.maximum(ax[..., 3], bx[..., 3]) - np.minimum(ax[..., 1], bx[..., 1])
    area_c = cw * ch
    return 1.0 - inter / union + (area_c - union) / area_c


def _as_batch(pred_boxes: Tensor, assignments, gts):
    """Normalize single-sample arguments to batched lists."""
    if isinstance(assignments, MatchAssignment):
        assignments = [assignments]
        gts = [gts]
        pred_boxes = pred_boxes.reshape(1, *pred_boxes.shape)
    return pred_boxes, assignments, gts


def _matched_indices(assignments):
    b_idx, q_idx, g_rows = [], [], []
    for b, a in enumerate(assignments):
        for q, g in a.pairs:
            b_idx.append(b)
            q_idx.append(q)
            g_rows.append((b, g))
    return np.array(b_idx, dtype=np.int64), np.array(q_idx, dtype=np.int64), g_rows


def l1_loss(pred_boxes, gt_boxes, assignment) -> Tensor:
    """Mean over matched pairs of the L1 distance in (cx, cy, w, h)."""
    pred_boxes = pred_boxes if isinstance(pred_boxes, Tensor) else Tensor(np.asarray(pred_boxes, dtype=np.float64))
    pb, assignments, gts = _as_batch(pred_boxes, assignment, gt_boxes)
    b_idx, q_idx, g_rows = _matched_indices(assignments)
    if len(b_idx) == 0:
        return _empty_scalar()
    target = np.array([np.asarray(gts[b], dtype=np.float64).reshape(-1, 4)[g] for b, g in g_rows])
    matched = pb[b_idx, q_idx]
    return T.abs_(matched - target).sum() * (1.0 / len(b_idx))


def matched_giou_loss(pred_boxes, gt_boxes, assignment) -> Tensor:
    pred_boxes = pred_boxes if isinstance(pred_boxes, Tensor) else Tensor(np.asarray(pred_boxes, dtype=np.float64))
    pb, assignments, gts = _as_batch(pred_boxes, assignment, gt_boxes)
    b_idx, q_idx, g_rows = _matched_indices(assignments)
    if len(b_idx) == 0:
        return _empty_scalar()
    target = np.array([np.asarray(gts[b], dtype=np.float64).reshape(-1, 4)[g] for b, g in g_rows])
    return giou_loss(pb[b_idx, q_idx], target).sum() * (1.0 / len(b_idx))


# -- soft token --------------------------------------------------------------------
def soft_token_targets(n_queries: int, n_slots: int, assignment: MatchAssignment,
                       spans: list[list[int]]) -> np.ndarray:
    """(Q, L+1) target rows: uniform over the matched span, else one-hot no-object."""
    target = np.zeros((n_queries, n_slots))
    target[:, -1] = 1.0
    for q, g in assignment.pairs:
        span = spans[g]
        if not span or max(span) >= n_slots - 1 or min(span) < 0:
            raise InputError(f"span {span} outside token range [0, {n_slots - 1})")
        target[q, :] = 0.0
        target[q, span] = 1.0 / len(span)
    return target


def soft_token_loss(token_logits, assignment, spans) -> Tensor:
    """Cross-entropy against the soft targets, averaged over all queries."""
    token_logits = token_logits if isinstance(token_logits, Tensor) else Tensor(np.asarray(token_logits, dtype=np.float64))
    if isinstance(assignment, MatchAssignment):
        assignment, spans = [assignment], [spans]
        token_logits = token_logits.reshape(1, *token_logits.shape)
    B, Q, S = token_logits.shape
    target = np.stack([soft_token_targets(Q, S, a, s) for a, s in zip(assignment, spans)])
    return -(T.log_softmax(token_logits, axis=-1) * target).sum() * (1.0 / (B * Q))


# -- contrastive ---------------------------------------------------------------------
def _contrastive_core(o: Tensor, t: Tensor, pos_o: np.ndarray, pos_t: np.ndarray,
                      token_mask: np.ndarray | None, temperature: float) -> ContrastiveResult:
    """Batched object->token and token->object InfoNCE terms.

    ``pos_o`` / ``pos_t`` are (..., N, L) 0/1 arrays of aligned (object, token)
    pairs for the two directions.  Object rows without positives are skipped in
    the object term; token columns without positives in the token term.
    """
    sims = T.matmul(o, t.swapaxes(-1, -2)) * (1.0 / temperature)
    if token_mask is not None:
        sims_o = sims + np.where(np.asarray(token_mask, bool), 0.0, MASK_FILL)[..., None, :]
    else:
        sims_o = sims
    n_pos_o = pos_o.sum(axis=-1, keepdims=True)
    n_pos_t = pos_t.sum(axis=-2, keepdims=True)
    w_o = np.divide(pos_o, n_pos_o, out=np.zeros_like(pos_o), where=n_pos_o > 0)
    w_t = np.divide(pos_t, n_pos_t, out=np.zeros_like(pos_t), where=n_pos_t > 0)
    rows_o = int((n_pos_o > 0).sum())
    cols_t = int((n_pos_t > 0).sum())
    loss_o = -(T.log_softmax(sims_o, axis=-1) * w_o).sum() * (1.0 / rows_o) if rows_o else _empty_scalar()
    loss_t = -(T.log_softmax(sims, axis=-2) * w_t).sum() * (1.0 / cols_t) if cols_t else _empty_scalar()
    empty = rows_o == 0 and cols_t == 0
    return ContrastiveResult(loss_o, loss_t, (loss_o + loss_t) * 0.5, empty)


def contrastive_loss(o, t, pos_o, pos_t=None, temperature: float = TEMPERATURE) -> ContrastiveResult:
    """Contrastive alignment between N object rows and L token rows.

    ``pos_o[i]`` is the set of tokens aligned with object i; ``pos_t[j]`` the
    set of objects aligned with token j (derived from ``pos_o`` when omitted).
    Rows of ``o`` and ``t`` are expected to be unit-normalized.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    o = o if isinstance(o, Tensor) else Tensor(np.asarray(o, dtype=np.float64))
    t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64))
    N, L = o.shape[-2], t.shape[-2]
    po = np.zeros((N, L))
    for i, toks in enumerate(pos_o):
        po[i, list(toks)] = 1.0
    if pos_t is None:
        pt = po.copy()
    else:
        pt = np.zeros((N, L))
        for j, objs in enumerate(pos_t):
            pt[list(objs), j] = 1.0
    return _contrastive_core(o, t, po, pt, None, temperature)


# -- matching and total ----------------------------------------------------------------
def matching_cost(boxes: np.ndarray, probs: np.ndarray, gt: GroundTruth, weights: LossWeights) -> np.ndarray:
    """(M, Q) cost: weighted L1 + GIoU loss minus weighted span probability mass."""
    if len(gt) == 0:
        return np.zeros((0, boxes.shape[0]))
    l1 = np.abs(gt.boxes[:, None, :] - boxes[None, :, :]).sum(-1)
    giou = giou_loss_matrix(gt.boxes, boxes)
    mass = np.stack([probs[:, span].sum(-1) for span in gt.spans])
    return weights.l1 * l1 + weights.giou * giou - weights.tok * mass


def match(pred: Predictions, gts: list[GroundTruth], weights: LossWeights) -> list[MatchAssignment]:
    boxes = pred.boxes.data.reshape(-1, *pred.boxes.shape[-2:])
    probs = pred.token_probs().reshape(-1, *pred.token_logits.shape[-2:])
    return [hungarian_match(matching_cost(boxes[b], probs[b], gt, weights)) for b, gt in enumerate(gts)]


def total_loss(pred: Predictions, gts, weights: LossWeights | None = None,
               temperature: float = TEMPERATURE,
               assignments: list[MatchAssignment] | None = None) -> LossReport:
    """Match, then assemble the weighted sum of all loss terms.

    ``pred`` is batched (B, Q, ...) with ``gts`` a list of B ground truths, or
    unbatched with a single :class:`GroundTruth`.  Passing ``assignments``
    skips matching (used to hold the matching fixed in gradient checks).
    """
    weights = weights or LossWeights()
    if isinstance(gts, GroundTruth):
        gts = [gts]
        pred = Predictions(
            pred.boxes.reshape(1, *pred.boxes.shape),
            pred.token_logits.reshape(1, *pred.token_logits.shape),
            pred.object_embeddings.reshape(1, *pred.object_embeddings.shape),
            pred.token_embeddings.reshape(1, *pred.token_embeddings.shape),
            None if pred.token_mask is None else np.asarray(pred.token_mask)[None],
        )
    if assignments is None:
        assignments = match(pred, gts, weights)

    l1 = l1_loss(pred.boxes, [g.boxes for g in gts], assignments)
    giou = matched_giou_loss(pred.boxes, [g.boxes for g in gts], assignments)
    tok = soft_token_loss(pred.token_logits, assignments, [g.spans for g in gts])

    B, Q = pred.object_embeddings.shape[:2]
    L = pred.token_embeddings.shape[-2]
    pos = np.zeros((B, Q, L))
    for b, (a, gt) in enumerate(zip(assignments, gts)):
        for q, g in a.pairs:
            pos[b, q, gt.spans[g]] = 1.0
    con = _contrastive_core(pred.object_embeddings, pred.token_embeddings, pos, pos,
                            pred.token_mask, temperature)

    total = l1 * weights.l1 + giou * weights.giou + tok * weights.tok + con.loss * weights.con
    return LossReport(
        l1=l1.item(), giou=giou.item(), soft_token=tok.item(),
        contrastive_o=con.loss_o.item(), contrastive_t=con.loss_t.item(), contrastive=con.loss.item(),
        total=total, weights=weights, assignments=assignments,
        empty=is_empty(l1),
    )
