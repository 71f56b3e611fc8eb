"""Model evaluation on scene sets and the train-then-evaluate experiment runner."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ContractError
from .metrics import GroundTruth, compute_map
from .pipeline.config import TIERS, RunConfig
from .pipeline.model import Detector
from .pipeline.synth import SceneSpec, SyntheticScene, make_dataset
from .pipeline.train import TrainResult, train

TRAIN_STREAM, EVAL_STREAM = 0, 1


def ground_truths(scenes: list[SyntheticScene]) -> list[list[GroundTruth]]:
    return [[GroundTruth(o.class_id, o.box, o.tier) for o in s.objects] for s in scenes]


def detect_all(model: Detector, scenes: list[SyntheticScene]):
    return [model.detect(s.image) for s in scenes]


def evaluate(model: Detector, scenes, iou_threshold: float = 0.5, tier: str | None = None, dets=None) -> dict:
    """Metrics report dict: map, per_class, tier, iou_threshold, num_images."""
    dets = detect_all(model, scenes) if dets is None else dets
    mean_ap, per_class = compute_map(dets, ground_truths(scenes), range(model.cfg.k_cat), iou_threshold, tier)
    return {
        "map": mean_ap,
        "per_class": {str(k): v for k, v in per_class.items()},
        "tier": tier or "all",
        "iou_threshold": iou_threshold,
        "num_images": len(scenes),
    }


CALIBRATION_SCENES = 8


def init_model(model_cfg, seed: int, train_scenes: list[SyntheticScene]) -> Detector:
    """Seeded initialization, including the data-driven scale of the Tucker core."""
    model = Detector(model_cfg, seed=seed)
    model.calibrate_tba([s.image for s in train_scenes[:CALIBRATION_SCENES]])
    return model


def datasets(cfg: RunConfig, seed: int):
    data_seed = cfg.data.seed if cfg.data.seed is not None else seed
    spec = SceneSpec.from_data_config(cfg.data, cfg.model.k_cat)
    return (
        make_dataset(cfg.data.num_scenes, data_seed, spec, stream=TRAIN_STREAM),
        make_dataset(cfg.data.eval_scenes, data_seed, spec, stream=EVAL_STREAM),
    )


@dataclass
class ExperimentResult:
    train: TrainResult
    overall: dict
    tiers: dict[str, dict]


def run_experiment(cfg: RunConfig, seed: int, ga: bool | None = None, tba: bool | None = None) -> ExperimentResult:
    """Train on the seed's training scenes and evaluate on its held-out scenes."""
    model_cfg = cfg.model
    if ga is not None or tba is not None:
        model_cfg = dataclasses.replace(
            model_cfg,
            ga_enabled=model_cfg.ga_enabled if ga is None else ga,
            tba_enabled=model_cfg.tba_enabled if tba is None else tba,
        )
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    train_scenes, eval_scenes = datasets(cfg, seed)
    model = init_model(model_cfg, seed, train_scenes)
    result = train(train_scenes, model, train_cfg)
    dets = detect_all(model, eval_scenes)
    overall = evaluate(model, eval_scenes, dets=dets)
    tiers = {}
    for t in TIERS:
        try:
            tiers[t] = evaluate(model, eval_scenes, tier=t, dets=dets)
        except ContractError:  # tier absent from the evaluation scenes
            tiers[t] = {"map": float("nan"), "per_class": {}, "tier": t}
    return ExperimentResult(result, overall, tiers)
