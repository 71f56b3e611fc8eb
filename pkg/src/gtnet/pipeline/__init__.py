from .config import DataConfig, ModelConfig, RunConfig, TrainConfig, load_config, parse_config
from .model import Detection, Detector, backbone_stub, fpn_lite
from .synth import SceneSpec, SyntheticScene, generate_scene, make_dataset
from .train import TrainResult, train

__all__ = [
    "DataConfig",
    "Detection",
    "Detector",
    "ModelConfig",
    "RunConfig",
    "SceneSpec",
    "SyntheticScene",
    "TrainConfig",
    "TrainResult",
    "backbone_stub",
    "fpn_lite",
    "generate_scene",
    "load_config",
    "make_dataset",
    "parse_config",
    "train",
]
