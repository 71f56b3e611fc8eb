"""Desk-scale multi-scale detector.

    image -> strided-conv backbone -> C2..C5
          -> guided attention on {C2,C3}, {C3,C4}, {C4,C5} -> G2..G4
          -> FPN-lite over {G2, G3, G4, C5} -> P2..P5
          -> Tucker bilinear attention on (P2, P3) -> R2
          -> shared dense head over {R2, P3, P4, P5}

Either attention stage can be switched off; the corresponding inputs then
pass through unchanged (G_i = C_i, R2 = P2).
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from .. import nn
from ..autodiff import Variable
from ..errors import ShapeError
from ..guided_attention import GAParams, ga_forward
from ..tensor import sigmoid
from ..tucker import TBAParams, bilinear_fuse_columns, tba_forward
from .config import ModelConfig

LEVEL_STRIDES = (4, 8, 16, 32)
LEVEL_NAMES = ("R2", "P3", "P4", "P5")


def component_rng(seed: int, component: str) -> np.random.Generator:
    """Generator for one model component, independent of which others exist."""
    return np.random.default_rng([int(seed), zlib.crc32(component.encode())])


class Detector:
    """Parameters plus forward passes for one model configuration."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        w = cfg.widths
        rng = component_rng(seed, "backbone")
        self.stem = nn.init_conv(rng, cfg.in_channels, cfg.stem_width, 3, "backbone.stem")
        chans = (cfg.stem_width,) + w
        self.backbone = [nn.init_conv(rng, chans[i], chans[i + 1], 3, f"backbone.c{i + 2}") for i in range(4)]
        self.ga = {}
        if cfg.ga_enabled:
            for lvl in (2, 3, 4):
                self.ga[lvl] = GAParams.init(component_rng(seed, f"ga{lvl}"), w[lvl - 1], name=f"ga{lvl}")
        rng = component_rng(seed, "fpn")
        self.lateral = [nn.init_conv(rng, w[i], cfg.c_fpn, 1, f"fpn.lateral{i + 2}") for i in range(4)]
        self.smooth = [nn.init_conv(rng, cfg.c_fpn, cfg.c_fpn, 3, f"fpn.smooth{i + 2}") for i in range(4)]
        self.tba = None
        if cfg.tba_enabled:
            self.tba = TBAParams.init(
                component_rng(seed, "tba"),
                cfg.c_fpn,
                cfg.c_fpn,
                cfg.ranks,
                cfg.k_cat,
                k_out=cfg.k_out_resolved,
                channels=cfg.c_fpn,
                l1_weight=cfg.l1_weight,
            )
        # unshared heads start as identical copies of the shared one
        self.heads = []
        for level in LEVEL_NAMES if not cfg.shared_head else LEVEL_NAMES[:1]:
            rng = component_rng(seed, "head")
            prefix = "head" if cfg.shared_head else f"head.{level}"
            tower = nn.init_conv(rng, cfg.c_fpn, cfg.c_fpn, 3, f"{prefix}.tower")
            cls = nn.init_conv(rng, cfg.c_fpn, cfg.k_cat, 1, f"{prefix}.cls")
            cls.bias.value = np.full(cfg.k_cat, -np.log((1 - cfg.prior_prob) / cfg.prior_prob))
            box = nn.init_conv(rng, cfg.c_fpn, 4, 1, f"{prefix}.box")
            self.heads.append((prefix, tower, cls, box))
        _, self.head_tower, self.head_cls, self.head_box = self.heads[0]

    # ------------------------------------------------------------------
    def parameters(self) -> dict[str, Variable]:
        out = {}
        out.update(self.stem.variables("backbone.stem"))
        for i, conv in enumerate(self.backbone):
            out.update(conv.variables(f"backbone.c{i + 2}"))
        for lvl, ga in self.ga.items():
            out.update(ga.variables(f"ga{lvl}"))
        for i, conv in enumerate(self.lateral):
            out.update(conv.variables(f"fpn.lateral{i + 2}"))
        for i, conv in enumerate(self.smooth):
            out.update(conv.variables(f"fpn.smooth{i + 2}"))
        if self.tba is not None:
            out.update(self.tba.variables("tba"))
        for prefix, tower, cls, box in self.heads:
            out.update(tower.variables(f"{prefix}.tower"))
            out.update(cls.variables(f"{prefix}.cls"))
            out.update(box.variables(f"{prefix}.box"))
        return out

    def zero_grad(self) -> None:
        for v in self.parameters().values():
            v.zero_grad()

    # ------------------------------------------------------------------
    def backbone_features(self, image) -> dict[str, Variable]:
        return backbone_stub(image, self.stem, self.backbone)

    def pyramid_inputs(self, image) -> dict[str, Variable]:
        """Backbone, guided attention and FPN levels, without the fusion."""
        feats = self.backbone_features(image)
        if self.ga:
            for lvl in (2, 3, 4):
                feats[f"G{lvl}"] = ga_forward(feats[f"C{lvl}"], feats[f"C{lvl + 1}"], self.ga[lvl])
            inputs = [feats["G2"], feats["G3"], feats["G4"], feats["C5"]]
        else:
            inputs = [feats["C2"], feats["C3"], feats["C4"], feats["C5"]]
        feats.update(fpn_lite(inputs, self.lateral, self.smooth))
        return feats

    def pyramid(self, image) -> dict[str, Variable]:
        """Every named feature map of the forward pass."""
        feats = self.pyramid_inputs(image)
        if self.tba is not None:
            feats["R2"] = tba_forward(feats["P2"], feats["P3"], self.tba)
        else:
            feats["R2"] = feats["P2"]
        return feats

    def calibrate_tba(self, images) -> float:
        """Rescale the Tucker core so the fused map starts at the scale of P2.

        The fusion is quadratic in its inputs, so at small feature scales a
        fixed core init leaves the fused map orders of magnitude weaker than
        the level it replaces. Returns the applied factor (1.0 without TBA).
        """
        if self.tba is None or not len(images):
            return 1.0
        ref, fused = [], []
        bias = self.tba.restore.bias
        for image in images:
            feats = self.pyramid_inputs(image)
            p2, p3 = feats["P2"].value, feats["P3"].value
            c, h, w = p2.shape
            q = np.repeat(np.repeat(p3, 2, axis=1), 2, axis=2).reshape(c, h * w)
            y = bilinear_fuse_columns(q, p2.reshape(c, h * w), self.tba).value
            f = nn.linear(y, self.tba.restore).value
            if bias is not None:
                f = f - bias.value[:, None]
            ref.append(p2.ravel())
            fused.append(f.ravel())
        num, den = np.std(np.concatenate(ref)), np.std(np.concatenate(fused))
        if not (np.isfinite(num) and np.isfinite(den)) or den == 0.0 or num == 0.0:
            return 1.0
        factor = float(num / den)
        self.tba.core.gamma_c.value = self.tba.core.gamma_c.value * factor
        return factor

    def head(self, feature: Variable, level: int = 0) -> tuple[Variable, Variable]:
        _, tower_p, cls_p, box_p = self.heads[level % len(self.heads)]
        tower = ad.relu(nn.conv2d(feature, tower_p))
        return nn.conv2d(tower, cls_p), nn.conv2d(tower, box_p)

    def forward_levels(self, image) -> list[tuple[Variable, Variable]]:
        """(class logits, box offsets) for each detection level, finest first."""
        feats = self.pyramid(image)
        return [self.head(feats[name], i) for i, name in enumerate(LEVEL_NAMES)]

    def detect(self, image, score_threshold: float = 0.05, nms_iou: float = 0.5, max_detections: int = 100):
        levels = self.forward_levels(image)
        size = np.asarray(image).shape[-1] if not isinstance(image, Variable) else image.shape[-1]
        return decode_detections(levels, size, score_threshold, nms_iou, max_detections)


def backbone_stub(image, stem: nn.Conv2dParams, convs) -> dict[str, Variable]:
    image = ad.constant(image)
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise ShapeError(f"backbone expects a square (C, S, S) image, got {image.shape}")
    if image.shape[1] % 32:
        raise ShapeError(f"image side must be divisible by 32, got {image.shape[1]}")
    x = ad.relu(nn.conv2d(image, stem, stride=2))
    feats = {}
    for i, conv in enumerate(convs):
        x = ad.relu(nn.conv2d(x, conv, stride=2))
        feats[f"C{i + 2}"] = x
    return feats


def fpn_lite(inputs, laterals, smooths) -> dict[str, Variable]:
    """Top-down pathway over four levels ordered finest first."""
    if len(inputs) != 4:
        raise ShapeError("fpn_lite needs exactly four input levels")
    for fine, coarse in zip(inputs, inputs[1:]):
        if fine.shape[1:] != (2 * coarse.shape[1], 2 * coarse.shape[2]):
            raise ShapeError(f"level {fine.shape} is not twice the resolution of {coarse.shape}")
    out = {}
    top = None
    for i in (3, 2, 1, 0):
        lat = nn.conv2d(inputs[i], laterals[i])
        top = lat if top is None else ad.add(lat, nn.upsample2x(top))
        out[f"P{i + 2}"] = nn.conv2d(top, smooths[i])
    return out


# ----------------------------------------------------------------------
# decoding
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]


def cell_centers(h: int, w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    return (xs + 0.5) * stride, (ys + 0.5) * stride


def decode_boxes(offsets: np.ndarray, stride: int, image_size: int) -> np.ndarray:
    """(4, H, W) log-distance offsets -> (H*W, 4) clipped x1, y1, x2, y2."""
    _, h, w = offsets.shape
    cx, cy = cell_centers(h, w, stride)
    d = stride * np.exp(np.clip(offsets, -8.0, 8.0))
    boxes = np.stack([cx - d[0], cy - d[1], cx + d[2], cy + d[3]], axis=-1).reshape(-1, 4)
    return np.clip(boxes, 0.0, float(image_size))


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; ties in score keep input order."""
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        i = order.pop(0)
        keep.append(i)
        if not order:
            break
        rest = np.array(order)
        ious = box_iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        order = [j for j, o in zip(order, ious) if o <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def decode_detections(levels, image_size: int, score_threshold=0.05, nms_iou=0.5, max_detections=100,
                      pre_nms_top=200) -> list[Detection]:
    all_boxes, all_scores, all_labels = [], [], []
    for (logits, offsets), stride in zip(levels, LEVEL_STRIDES):
        lv = logits.value if isinstance(logits, Variable) else logits
        ov = offsets.value if isinstance(offsets, Variable) else offsets
        k = lv.shape[0]
        scores = sigmoid(lv).reshape(k, -1)  # (K, H*W)
        boxes = decode_boxes(ov, stride, image_size)
        cls_idx, cell_idx = np.nonzero(scores > score_threshold)
        s = scores[cls_idx, cell_idx]
        if s.size > pre_nms_top:
            top = np.argsort(-s, kind="stable")[:pre_nms_top]
            cls_idx, cell_idx, s = cls_idx[top], cell_idx[top], s[top]
        all_boxes.append(boxes[cell_idx])
        all_scores.append(s)
        all_labels.append(cls_idx)
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    valid = (boxes[:, 2] - boxes[:, 0] > 1e-6) & (boxes[:, 3] - boxes[:, 1] > 1e-6)
    boxes, scores, labels = boxes[valid], scores[valid], labels[valid]
    dets = []
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        for j in nms(boxes[idx], scores[idx], nms_iou):
            i = idx[j]
            dets.append(Detection(int(c), float(scores[i]), tuple(float(v) for v in boxes[i])))
    dets.sort(key=lambda d: -d.score)
    return dets[:max_detections]
