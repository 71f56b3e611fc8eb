"""Independent reference implementations shared by the metric tests."""
from dataclasses import dataclass

import numpy as np

from gtnet.metrics import GroundTruth, iou


@dataclass
class Det:
    class_id: int
    score: float
    box: tuple


def oracle_ap(dets, gts, class_id, thr=0.5):
    """Enumerate every score-threshold operating point independently.

    For each threshold, the surviving detections are re-matched from scratch;
    AP is the exact area under max_{r' >= r} P(r').
    """
    all_scores = sorted({d.score for img in dets for d in img if d.class_id == class_id}, reverse=True)
    n_gt = sum(1 for img in gts for g in img if g.class_id == class_id)
    if n_gt == 0:
        return 0.0
    points = [(0.0, 1.0)]
    for t in all_scores:
        tp = fp = 0
        for img_dets, img_gts in zip(dets, gts):
            kept = sorted((d for d in img_dets if d.class_id == class_id and d.score >= t), key=lambda d: -d.score)
            truth = [g.box for g in img_gts if g.class_id == class_id]
            used = [False] * len(truth)
            for d in kept:
                cands = [(iou(d.box, b), j) for j, b in enumerate(truth) if not used[j]]
                cands = [c for c in cands if c[0] >= thr]
                if cands:
                    best = max(cands, key=lambda c: (c[0], -c[1]))
                    used[best[1]] = True
                    tp += 1
                else:
                    fp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    recalls = sorted({r for r, _ in points})
    ap, prev = 0.0, 0.0
    for r in recalls:
        if r == 0.0:
            continue
        ap += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return ap


def random_box(rng, size=20.0):
    x1, y1 = rng.uniform(0, size, 2)
    w, h = rng.uniform(2, 8, 2)
    return (float(x1), float(y1), float(x1 + w), float(y1 + h))


def random_instance(rng, n_dets=10, n_gts=5, classes=1, images=2):
    gts = [[] for _ in range(images)]
    dets = [[] for _ in range(images)]
    for _ in range(rng.integers(0, n_gts + 1)):
        img = rng.integers(images)
        gts[img].append(GroundTruth(int(rng.integers(classes)), random_box(rng)))
    for _ in range(rng.integers(0, n_dets + 1)):
        img = rng.integers(images)
        if gts[img] and rng.random() < 0.6:
            g = gts[img][rng.integers(len(gts[img]))]
            jitter = rng.normal(0, 0.7, 4)
            x1, y1, x2, y2 = np.asarray(g.box) + jitter
            box = (min(x1, x2 - 0.5), min(y1, y2 - 0.5), max(x2, x1 + 0.5), max(y2, y1 + 0.5))
            cls = g.class_id if rng.random() < 0.9 else int(rng.integers(classes))
        else:
            box, cls = random_box(rng), int(rng.integers(classes))
        dets[img].append(Det(cls, float(rng.random()), tuple(float(v) for v in box)))
    return dets, gts
