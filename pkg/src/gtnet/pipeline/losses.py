"""Dense-head target assignment and the detection losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Variable
from ..errors import ShapeError
from .model import LEVEL_STRIDES, cell_centers

# an object goes to the first level whose bound covers its longest side
LEVEL_MAX_SIDE = (16.0, 32.0, 64.0, np.inf)
CENTER_RADIUS = 1.5  # in units of the level stride


@dataclass
class LevelTargets:
    cls: np.ndarray  # (K, H, W) binary
    box: np.ndarray  # (4, H, W) log-distances / stride
    pos: np.ndarray  # (H, W) bool


def assign_level(box) -> int:
    side = max(box[2] - box[0], box[3] - box[1])
    return next(i for i, bound in enumerate(LEVEL_MAX_SIDE) if side <= bound)


def build_targets(boxes: np.ndarray, labels: np.ndarray, image_size: int, k_cat: int) -> list[LevelTargets]:
    levels = []
    for stride in LEVEL_STRIDES:
        n = image_size // stride
        levels.append(LevelTargets(np.zeros((k_cat, n, n)), np.zeros((4, n, n)), np.zeros((n, n), dtype=bool)))
    for box, label in zip(np.asarray(boxes).reshape(-1, 4), labels):
        li = assign_level(box)
        stride = LEVEL_STRIDES[li]
        t = levels[li]
        n = t.pos.shape[0]
        cx, cy = cell_centers(n, n, stride)
        x1, y1, x2, y2 = box
        bx, by = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        r = CENTER_RADIUS * stride
        inside = (cx > x1) & (cx < x2) & (cy > y1) & (cy < y2)
        near = (np.abs(cx - bx) <= r) & (np.abs(cy - by) <= r)
        cells = inside & near
        if not cells.any():
            cells = np.zeros_like(cells)
            cells[min(int(by // stride), n - 1), min(int(bx // stride), n - 1)] = True
        t.pos |= cells
        t.cls[:, cells] = 0.0
        t.cls[int(label), cells] = 1.0
        dist = np.stack([cx - x1, cy - y1, x2 - cx, y2 - cy])
        t.box[:, cells] = np.log(np.maximum(dist[:, cells], 0.25) / stride)
    return levels


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def sigmoid_focal_loss(logits, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Variable:
    """Summed binary focal loss over every logit; ``targets`` are 0/1."""
    logits = ad.constant(logits)
    x = logits.value
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != x.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {x.shape}")
    p = 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
    log_p, log_q = _log_sigmoid(x), _log_sigmoid(-x)
    pos = -alpha * (1.0 - p) ** gamma * log_p
    neg = -(1.0 - alpha) * p**gamma * log_q
    loss = np.sum(t * pos + (1.0 - t) * neg)

    def back(g):
        d_pos = alpha * (gamma * p * (1.0 - p) ** gamma * log_p - (1.0 - p) ** (gamma + 1.0))
        d_neg = (1.0 - alpha) * (p ** (gamma + 1.0) - gamma * (1.0 - p) * p**gamma * log_q)
        return (g[0] * (t * d_pos + (1.0 - t) * d_neg),)

    return ad._make(np.array([loss]), (logits,), back)


def smooth_l1_loss(pred, target: np.ndarray, mask: np.ndarray, beta: float = 0.1) -> Variable:
    """Summed smooth-L1 over the (4, H, W) entries at positions where ``mask``."""
    pred = ad.constant(pred)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), pred.shape[1:])[None]
    d = pred.value - np.asarray(target, dtype=np.float64)
    ad_ = np.abs(d)
    quad = ad_ < beta
    loss = np.sum(m * np.where(quad, 0.5 * d * d / beta, ad_ - 0.5 * beta))

    def back(g):
        return (g[0] * m * np.where(quad, d / beta, np.sign(d)),)

    return ad._make(np.array([loss]), (pred,), back)


def detection_loss(levels, targets: list[LevelTargets], alpha=0.25, gamma=2.0, beta=0.1, box_weight=1.0) -> Variable:
    """Focal classification + smooth-L1 box loss, normalized by positive count."""
    num_pos = max(1, int(sum(t.pos.sum() for t in targets)))
    terms = []
    for (logits, offsets), t in zip(levels, targets):
        terms.append(sigmoid_focal_loss(logits, t.cls, alpha, gamma))
        if t.pos.any():
            terms.append(ad.mul_scalar(smooth_l1_loss(offsets, t.box, t.pos, beta), box_weight))
    return ad.mul_scalar(ad.add_n(terms), 1.0 / num_pos)
