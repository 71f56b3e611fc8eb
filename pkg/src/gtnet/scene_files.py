"""Scene sets on disk: one ``.npy`` image per scene plus ``annotations.json``.

The annotation file is a list of ``{"image": <file name>, "objects": [{"class",
"box": [x1, y1, x2, y2], "tier"}]}`` in scene order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .pipeline.synth import SceneObject, SyntheticScene

ANNOTATIONS = "annotations.json"


def write_scenes(scenes: list[SyntheticScene], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.npy"
        np.save(out / name, np.ascontiguousarray(scene.image, dtype="<f8"), allow_pickle=False)
        records.append(
            {
                "image": name,
                "objects": [{"class": o.class_id, "box": list(o.box), "tier": o.tier} for o in scene.objects],
            }
        )
    path = out / ANNOTATIONS
    path.write_text(json.dumps(records, indent=1) + "\n")
    return path


def read_annotations(directory) -> list[dict]:
    path = Path(directory) / ANNOTATIONS
    try:
        records = json.loads(path.read_text())
    except OSError as exc:
        raise ContractError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc.msg}", exc.pos) from exc
    if not isinstance(records, list):
        raise FormatError(f"{path} must hold a list of scenes", 0)
    return records


def _objects(record: dict, where: str) -> list[SceneObject]:
    try:
        return [SceneObject(int(o["class"]), tuple(float(v) for v in o["box"]), o.get("tier")) for o in record["objects"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"malformed annotation in {where}: {exc}") from exc


def read_scenes(directory) -> list[SyntheticScene]:
    directory = Path(directory)
    scenes = []
    for k, record in enumerate(read_annotations(directory)):
        try:
            image = np.load(directory / record["image"], allow_pickle=False)
        except (KeyError, TypeError) as exc:
            raise ContractError(f"scene {k} has no image entry") from exc
        except (OSError, ValueError) as exc:
            raise ContractError(f"cannot load image of scene {k}: {exc}") from exc
        scenes.append(SyntheticScene(np.asarray(image, dtype=np.float64), _objects(record, f"scene {k}")))
    return scenes
