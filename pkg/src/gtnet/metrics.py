"""IoU, per-class average precision and mean average precision.

Detections and ground truths are given per image: ``dets[i]`` is a list of
objects with ``class_id``, ``score`` and ``box`` attributes and ``gts[i]``
a list with ``class_id``, ``box`` and (optionally) ``tier``.  Boxes are
``(x1, y1, x2, y2)`` with ``x1 < x2`` and ``y1 < y2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .pipeline.synth import box_tier


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: tuple[float, float, float, float]
    tier: str | None = None


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise ContractError(f"degenerate box in iou({tuple(a)}, {tuple(b)})")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _gt_tier(g) -> str:
    return g.tier if getattr(g, "tier", None) else box_tier(g.box)


def match_detections(dets, gts, class_id: int, iou_threshold: float = 0.5, tier: str | None = None):
    """Greedy score-ordered matching for one class.

    Returns ``(scores, is_tp, num_gt)`` for the detections that count,
    already sorted by descending score (ties keep input order).  With a
    ``tier``, ground truths of other tiers are ignored: detections matching
    them, and unmatched detections whose own size falls in another tier, are
    dropped instead of counted as false positives.
    """
    if len(dets) != len(gts):
        raise ContractError(f"{len(dets)} detection lists for {len(gts)} images")
    cand = []
    for img, image_dets in enumerate(dets):
        for d in image_dets:
            if d.class_id == class_id:
                cand.append((img, float(d.score), d.box))
    order = sorted(range(len(cand)), key=lambda k: -cand[k][1])
    care, ignore = [], []
    num_gt = 0
    for image_gts in gts:
        c = [g.box for g in image_gts if g.class_id == class_id and (tier is None or _gt_tier(g) == tier)]
        o = [g.box for g in image_gts if g.class_id == class_id and tier is not None and _gt_tier(g) != tier]
        care.append(c)
        ignore.append(o)
        num_gt += len(c)
    matched = [np.zeros(len(c), dtype=bool) for c in care]
    scores, is_tp = [], []
    for k in order:
        img, score, box = cand[k]
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(care[img]):
            if matched[img][j]:
                continue
            ov = iou(box, g)
            if ov >= best_iou and (best < 0 or ov > best_iou):
                best, best_iou = j, ov
        if best >= 0:
            matched[img][best] = True
            scores.append(score)
            is_tp.append(True)
            continue
        if tier is not None:
            if any(iou(box, g) >= iou_threshold for g in ignore[img]):
                continue
            if box_tier(box) != tier:
                continue
        scores.append(score)
        is_tp.append(False)
    return np.array(scores), np.array(is_tp, dtype=bool), num_gt


def pr_curve(is_tp: np.ndarray, num_gt: int) -> PRCurve:
    """All-point interpolated PR curve from ranked TP flags."""
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    if num_gt == 0 or is_tp.size == 0:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(mpre[::-1])[::-1]
    ap = float(np.sum((mrec[1:] - mrec[:-1]) * envelope[1:]))
    return PRCurve(recall, precision, ap)


def compute_ap(dets, gts, class_id: int, iou_threshold: float = 0.5, tier: str | None = None) -> float:
    """All-point AP for one class; 0.0 when the class has no ground truth."""
    _, is_tp, num_gt = match_detections(dets, gts, class_id, iou_threshold, tier)
    return pr_curve(is_tp, num_gt).ap


def compute_map(
    dets,
    gts,
    categories: Sequence[int],
    iou_threshold: float = 0.5,
    tier: str | None = None,
) -> tuple[float, dict[int, float]]:
    """Mean AP over the categories that have at least one ground truth instance."""
    categories = list(categories)
    if not categories:
        raise ContractError("category set must be nonempty")
    tier = None if tier in (None, "all") else tier
    per_class = {}
    for c in categories:
        _, is_tp, num_gt = match_detections(dets, gts, c, iou_threshold, tier)
        if num_gt:
            per_class[c] = pr_curve(is_tp, num_gt).ap
    if not per_class:
        raise ContractError("no category has any ground truth instance")
    return float(np.mean(list(per_class.values()))), per_class
