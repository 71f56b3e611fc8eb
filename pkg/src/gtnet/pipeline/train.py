"""Plain SGD training of the detector on synthetic scenes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..errors import NumericError
from ..tucker import l1_core_penalty
from .config import TrainConfig
from .losses import build_targets, detection_loss
from .model import Detector
from .synth import SyntheticScene

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: Detector
    losses: list[float] = field(default_factory=list)

    def window_medians(self, frac: float = 0.2) -> tuple[float, float]:
        n = max(1, int(round(len(self.losses) * frac)))
        return float(np.median(self.losses[:n])), float(np.median(self.losses[-n:]))


def scene_loss(model: Detector, scene: SyntheticScene, targets, cfg: TrainConfig):
    levels = model.forward_levels(scene.image)
    return detection_loss(levels, targets, cfg.focal_alpha, cfg.focal_gamma, cfg.box_beta, cfg.box_weight)


def total_loss(model: Detector, batch, cfg: TrainConfig):
    """Mean detection loss over ``batch`` of (scene, targets) plus the core L1 term."""
    per_scene = [scene_loss(model, s, t, cfg) for s, t in batch]
    loss = ad.mul_scalar(ad.add_n(per_scene), 1.0 / len(per_scene))
    if model.tba is not None:
        loss = ad.add(loss, l1_core_penalty(model.tba))
    return loss


def _clip(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


def train(scenes: list[SyntheticScene], model: Detector, cfg: TrainConfig, progress=None) -> TrainResult:
    """Run ``cfg.steps`` SGD steps over ``scenes``, cycling in seeded random order."""
    params = list(model.parameters().values())
    size = scenes[0].image.shape[-1] if scenes else 0
    targets = [build_targets(s.boxes, s.labels, size, model.cfg.k_cat) for s in scenes]
    rng = np.random.default_rng([cfg.seed, 7919])
    order: list[int] = []
    result = TrainResult(model)
    for step in range(cfg.steps):
        batch = []
        while len(batch) < cfg.batch_size:
            if not order:
                order = list(rng.permutation(len(scenes)))
            i = order.pop()
            batch.append((scenes[i], targets[i]))
        model.zero_grad()
        # overflow is reported through the finiteness checks below
        with np.errstate(over="ignore", invalid="ignore"):
            with ad.Tape() as tape:
                loss = total_loss(model, batch, cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}", step=step)
            tape.backward(loss)
        grads = _clip([p.grad for p in params], cfg.grad_clip)
        for p, g in zip(params, grads):
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {p.name} at step {step}", step=step)
            p.value = p.value - cfg.lr * g
        result.losses.append(value)
        if progress is not None:
            progress(step, value)
        elif step % 50 == 0:
            log.debug("step %d loss %.5f", step, value)
    model.zero_grad()
    return result
