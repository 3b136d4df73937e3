"""Anchor matching and the SSD-style training loss, with NMS for inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet, Box

VARIANCES = (0.1, 0.2)


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    score: float
    class_id: int = 1
    det_id: int = 0

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"detection {self.det_id} has non-finite score {self.score}")


def iou(a, b) -> float:
    """Intersection over union; two empty boxes give 0."""
    iw = max(min(a[2], b[2]) - max(a[0], b[0]), 0.0)
    ih = max(min(a[3], b[3]) - max(a[1], b[1]), 0.0)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


@dataclass
class MatchResult:
    gt_index: np.ndarray  # (N,) matched ground truth, -1 for negatives
    forced: np.ndarray  # (N,) bool, claimed in the best-match pass
    labels: np.ndarray  # (N,) class id, 0 = background
    offsets: np.ndarray  # (N, 4) encoded targets, zero for negatives
    best_iou: np.ndarray  # (N,) IoU with the assigned (or best) ground truth

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def _anchor_boxes(anchors) -> np.ndarray:
    if isinstance(anchors, AnchorSet):
        return anchors.boxes
    return np.asarray(anchors, dtype=np.float64).reshape(-1, 4)


def match(anchors, gts, threshold: float = 0.5, labels=None, variances=VARIANCES) -> MatchResult:
    """Bidirectional assignment.

    Ground-truth side: repeatedly take the highest-IoU (gt, anchor) pair among
    unserved boxes and unclaimed anchors (ties: lowest gt, then lowest
    anchor) so each box gets its own forced anchor whenever there are enough
    anchors. Anchor side: every unclaimed anchor whose best IoU reaches the
    threshold becomes positive to its argmax box (ties: lowest gt index).
    """
    boxes = _anchor_boxes(anchors)
    n = len(boxes)
    if n == 0:
        raise ValueError("anchor set is empty")
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    g = len(gts)
    labels = np.ones(g, dtype=int) if labels is None else np.asarray(labels, dtype=int)
    gt_index = np.full(n, -1)
    forced = np.zeros(n, dtype=bool)
    if g == 0:
        return MatchResult(gt_index, forced, np.zeros(n, dtype=int), np.zeros((n, 4)), np.zeros(n))

    ious = iou_matrix(gts, boxes)  # (G, N)
    work = ious.copy()
    for _ in range(min(g, n)):
        # flat argmax scans row-major: lowest gt then lowest anchor on ties
        gi, ai = np.unravel_index(np.argmax(work), work.shape)
        gt_index[ai] = gi
        forced[ai] = True
        work[gi, :] = -1.0
        work[:, ai] = -1.0

    best_gt = np.argmax(ious, axis=0)
    best = ious[best_gt, np.arange(n)]
    free = ~forced & (best >= threshold)
    gt_index[free] = best_gt[free]

    pos = gt_index >= 0
    lab = np.zeros(n, dtype=int)
    lab[pos] = labels[gt_index[pos]]
    offsets = np.zeros((n, 4))
    if pos.any():
        offsets[pos] = encode(boxes[pos], gts[gt_index[pos]], variances)
    best_iou = best.copy()
    best_iou[pos] = ious[gt_index[pos], np.nonzero(pos)[0]]
    return MatchResult(gt_index, forced, lab, offsets, best_iou)


def _center_size(b):
    b = np.asarray(b, dtype=np.float64)
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + w / 2, b[..., 1] + h / 2, w, h


def encode(anchor, gt, variances=VARIANCES) -> np.ndarray:
    """Centre-size offsets of ``gt`` relative to ``anchor`` (broadcasts over leading axes)."""
    acx, acy, aw, ah = _center_size(anchor)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("cannot encode against a zero-size anchor")
    gcx, gcy, gw, gh = _center_size(gt)
    vc, vs = variances
    return np.stack([
        (gcx - acx) / (vc * aw),
        (gcy - acy) / (vc * ah),
        np.log(gw / aw) / vs,
        np.log(gh / ah) / vs,
    ], axis=-1)


def decode(anchor, offsets, variances=VARIANCES) -> np.ndarray:
    acx, acy, aw, ah = _center_size(anchor)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("cannot decode against a zero-size anchor")
    t = np.asarray(offsets, dtype=np.float64)
    vc, vs = variances
    cx = acx + t[..., 0] * vc * aw
    cy = acy + t[..., 1] * vc * ah
    w = aw * np.exp(t[..., 2] * vs)
    h = ah * np.exp(t[..., 3] * vs)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def smooth_l1(x) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def ssd_loss(class_scores, box_preds, m: MatchResult, loc_weight: float = 1.0, neg_ratio: int = 3):
    """Return (total, conf, loc) with total = (conf + loc_weight * loc) / positives.

    conf is softmax cross-entropy over positives plus the hardest negatives
    (by background loss, ties to the lower index) at ``neg_ratio`` per
    positive; loc is smooth-L1 over positive offsets. With no positives all
    three are 0.
    """
    scores = np.asarray(class_scores, dtype=np.float64)
    preds = np.asarray(box_preds, dtype=np.float64)
    n = len(m.gt_index)
    if scores.ndim != 2 or scores.shape[0] != n:
        raise ValueError(f"class_scores must be ({n}, C), got {scores.shape}")
    if preds.shape != (n, 4):
        raise ValueError(f"box_preds must be ({n}, 4), got {preds.shape}")
    pos = m.positive
    n_pos = int(pos.sum())
    if n_pos == 0:
        return 0.0, 0.0, 0.0
    ce = -log_softmax(scores)[np.arange(n), m.labels]
    loc = float(smooth_l1(preds[pos] - m.offsets[pos]).sum())
    neg_idx = np.nonzero(~pos)[0]
    k = min(neg_ratio * n_pos, len(neg_idx))
    order = np.lexsort((neg_idx, -ce[neg_idx]))  # loss desc, index asc
    hard = neg_idx[order[:k]]
    conf = float(ce[pos].sum() + ce[hard].sum())
    return (conf + loc_weight * loc) / n_pos, conf, loc


def nms(dets, iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy suppression within each (image, class); score desc, ties by input order."""
    dets = list(dets)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        d = dets[i]
        if all(
            dets[j].image_id != d.image_id or dets[j].class_id != d.class_id or iou(dets[j].box, d.box) <= iou_threshold
            for j in kept
        ):
            kept.append(i)
    return [dets[i] for i in kept]
