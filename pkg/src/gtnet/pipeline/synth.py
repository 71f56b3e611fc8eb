"""Synthetic multi-scale scenes: noisy images with class-coded geometric blobs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import GenerationError
from .config import TIERS, DataConfig

# side-length ranges (pixels) per size tier at the reference size S = 128
TIER_SIDES = {"small": (6, 12), "medium": (16, 36), "large": (48, 72)}
SHAPES = ("square", "disk", "frame", "cross", "diamond")


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels, x2/y2 exclusive
    tier: str


@dataclass
class SyntheticScene:
    image: np.ndarray  # (channels, S, S)
    objects: list[SceneObject] = field(default_factory=list)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)


@dataclass
class SceneSpec:
    image_size: int = 128
    channels: int = 1
    k_cat: int = 5
    min_objects: int = 2
    max_objects: int = 6
    tier_weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    tiers: tuple[str, ...] | None = None  # explicit tier list overrides count/weights
    noise_std: float = 0.08
    max_retries: int = 200
    max_large: int = 1  # sampled large objects beyond this become medium
    classes: tuple[int, ...] | None = None  # explicit class per object (with ``tiers``)
    centered: bool = False  # place the (single) object at the image center

    @classmethod
    def from_data_config(cls, data: DataConfig, k_cat: int) -> "SceneSpec":
        return cls(
            image_size=data.image_size,
            channels=data.channels,
            k_cat=k_cat,
            min_objects=data.min_objects,
            max_objects=data.max_objects,
            tier_weights=data.tier_weights,
            noise_std=data.noise_std,
        )


def class_intensity(class_id: int, k_cat: int) -> float:
    if k_cat == 1:
        return 1.0
    return 0.45 + 0.55 * class_id / (k_cat - 1)


def render_mask(shape_name: str, h: int, w: int) -> np.ndarray:
    """Boolean (h, w) mask whose bounding box is the full h x w rectangle."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy = (yy + 0.5 - h / 2.0) / (h / 2.0)
    dx = (xx + 0.5 - w / 2.0) / (w / 2.0)
    if shape_name == "square":
        return np.ones((h, w), dtype=bool)
    if shape_name == "disk":
        return dx * dx + dy * dy <= 1.0 + 1e-9
    if shape_name == "frame":
        t = max(1, min(h, w) // 4)
        mask = np.ones((h, w), dtype=bool)
        mask[t : h - t, t : w - t] = False
        return mask
    if shape_name == "cross":
        return (np.abs(dx) <= 0.36) | (np.abs(dy) <= 0.36)
    if shape_name == "diamond":
        # the slack keeps the extreme rows and columns for even sides
        return np.abs(dx) + np.abs(dy) <= 1.0 + 1.0 / min(h, w) + 1e-9
    raise ValueError(f"unknown shape {shape_name!r}")


def _tier_sides(tier: str, size: int) -> tuple[int, int]:
    lo, hi = TIER_SIDES[tier]
    hi = min(hi, size)
    if lo > hi:
        raise GenerationError(f"{tier} objects need at least {lo} px, image is {size} px")
    return lo, hi


def _overlaps(box, others, margin: float) -> bool:
    x1, y1, x2, y2 = box
    for ox1, oy1, ox2, oy2 in others:
        if x1 < ox2 + margin and ox1 < x2 + margin and y1 < oy2 + margin and oy1 < y2 + margin:
            return True
    return False


def generate_scene(seed, spec: SceneSpec | None = None) -> SyntheticScene:
    """Render one scene; the same seed and spec always give the same scene."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    s = spec.image_size
    if spec.tiers is not None:
        tiers = list(spec.tiers)
    else:
        n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        probs = np.asarray(spec.tier_weights, dtype=np.float64)
        tiers = [TIERS[i] for i in rng.choice(3, size=n, p=probs / probs.sum())]
        large = [i for i, t in enumerate(tiers) if t == "large"]
        for i in large[spec.max_large :]:
            tiers[i] = "medium"
    for t in tiers:
        if t not in TIER_SIDES:
            raise GenerationError(f"unknown size tier {t!r}")
    # place big objects first; they are the hardest to fit
    order = sorted(range(len(tiers)), key=lambda i: TIERS.index(tiers[i]), reverse=True)
    image = np.zeros((spec.channels, s, s))
    placed: dict[int, SceneObject] = {}
    boxes = []
    for idx in order:
        tier = tiers[idx]
        lo, hi = _tier_sides(tier, s)
        if spec.classes is not None:
            class_id = int(spec.classes[idx])
        else:
            class_id = int(rng.integers(spec.k_cat))
        for _ in range(spec.max_retries):
            w = int(rng.integers(lo, hi + 1))
            h = int(np.clip(round(w * rng.uniform(0.75, 1.33)), lo, hi))
            if spec.centered:
                x1, y1 = (s - w) // 2, (s - h) // 2
            else:
                x1 = int(rng.integers(0, s - w + 1))
                y1 = int(rng.integers(0, s - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            if not _overlaps(box, boxes, margin=2):
                break
        else:
            raise GenerationError(f"could not place {len(tiers)} objects after {spec.max_retries} retries")
        boxes.append(box)
        mask = render_mask(SHAPES[class_id % len(SHAPES)], h, w)
        image[:, y1 : y1 + h, x1 : x1 + w] += mask * class_intensity(class_id, spec.k_cat)
        placed[idx] = SceneObject(class_id, tuple(float(v) for v in box), tier)
    image += rng.normal(0.0, spec.noise_std, size=image.shape)
    return SyntheticScene(image=image, objects=[placed[i] for i in range(len(tiers))])


def make_dataset(num_scenes: int, seed: int, spec: SceneSpec, stream: int = 0) -> list[SyntheticScene]:
    """``num_scenes`` scenes; ``stream`` separates train and eval sets of one seed."""
    return [generate_scene([seed, stream, i], spec) for i in range(num_scenes)]


def box_tier(box) -> str:
    """Size tier of an arbitrary box, by the geometric mean of its sides."""
    x1, y1, x2, y2 = box
    side = np.sqrt(max(x2 - x1, 0.0) * max(y2 - y1, 0.0))
    if side < 14.0:
        return "small"
    if side < 42.0:
        return "medium"
    return "large"
