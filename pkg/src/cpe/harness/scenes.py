"""Deterministic synthetic scenes for the detection benchmark.

Each scene plants class-coded rectangles on a noisy feature volume. Every
object carries a small high-response "discriminative part" along one of
its sides, so a naive instance scorer is drawn to part-sized boxes; the
proposal set deliberately mixes near-ground-truth boxes, part-only boxes
and background boxes to expose that failure mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cpe.features import FeatureMap
from cpe.geometry import Box, ImageDims, clip_box, iou

__all__ = ["SceneSpec", "GroundTruth", "SyntheticScene", "generate_scene", "generate_dataset"]


@dataclass(frozen=True)
class SceneSpec:
    """Knobs of the scene generator.

    ``part_fraction`` is the side fraction of the discriminative corner
    rectangle; its area fraction (the square) stays well under the 0.5
    IoU protocol threshold so part-only proposals never count as correct
    localizations.
    """

    classes: int = 4
    objects_min: int = 1
    objects_max: int = 2
    distractors: int = 4
    image_size: int = 64
    feature_size: int = 32
    channels: int = 6
    jitter_proposals: int = 3
    part_proposals: int = 2
    noise: float = 0.05
    part_fraction: tuple[float, float] = (0.22, 0.28)

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.channels < self.classes + 1:
            raise ValueError("need a texture channel on top of one channel per class")
        if self.objects_min > self.objects_max or self.objects_min < 0:
            raise ValueError("bad objects range")
        if not 0 < self.part_fraction[0] <= self.part_fraction[1] <= 0.6:
            raise ValueError("part side fraction must stay below 0.6")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int
    part: Box | None = None


@dataclass
class SyntheticScene:
    scene_id: int
    dims: ImageDims
    feature: FeatureMap
    proposals: list[Box]
    gt: list[GroundTruth]
    label: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.label is None:
            raise ValueError("scene label missing")


def _paint(values: np.ndarray, ch: int, b: Box, scale: float, amount: float) -> None:
    h, w = values.shape[1:]
    r0 = min(max(int(np.floor(b.y * scale)), 0), h - 1)
    r1 = min(max(int(np.ceil(b.y2 * scale)), r0 + 1), h)
    c0 = min(max(int(np.floor(b.x * scale)), 0), w - 1)
    c1 = min(max(int(np.ceil(b.x2 * scale)), c0 + 1), w)
    values[ch, r0:r1, c0:c1] += amount


def _part_box(b: Box, corner: str, frac: float) -> Box:
    """Discriminative corner rectangle, area fraction frac^2 of the object."""
    pw, ph = b.w * frac, b.h * frac
    x = b.x if "left" in corner else b.x2 - pw
    y = b.y if "top" in corner else b.y2 - ph
    return Box(x, y, pw, ph)


def _random_box(rng: np.random.Generator, size: float, min_side: float, max_side: float) -> Box:
    w = rng.uniform(min_side, max_side)
    h = rng.uniform(min_side, max_side)
    x = rng.uniform(0.0, size - w)
    y = rng.uniform(0.0, size - h)
    return Box(x, y, w, h)


def _jitter(rng: np.random.Generator, b: Box, dims: ImageDims, rel: float = 0.08) -> Box:
    dx = rng.uniform(-rel, rel) * b.w
    dy = rng.uniform(-rel, rel) * b.h
    dw = b.w * (1.0 + rng.uniform(-rel, rel))
    dh = b.h * (1.0 + rng.uniform(-rel, rel))
    return clip_box(Box(b.x + dx, b.y + dy, max(dw, 2.0), max(dh, 2.0)), dims)


def generate_scene(seed: int, spec: SceneSpec, scene_id: int | None = None) -> SyntheticScene:
    """One reproducible scene; identical seeds give bit-identical scenes."""
    rng = np.random.default_rng((int(seed), 0x5CE4E))
    size = float(spec.image_size)
    dims = ImageDims(size, size)
    scale = spec.feature_size / size

    values = rng.normal(0.0, spec.noise, size=(spec.channels, spec.feature_size, spec.feature_size))

    n_objects = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    gts: list[GroundTruth] = []
    min_side, max_side = size * 0.22, size * 0.45
    texture = spec.channels - 1
    for _ in range(n_objects):
        cls = int(rng.integers(0, spec.classes))
        box = _random_box(rng, size, min_side, max_side)
        for _ in range(40):
            if all(iou(box, g.box) < 0.1 for g in gts):
                break
            box = _random_box(rng, size, min_side, max_side)
        corner = ("top-left", "top-right", "bottom-left", "bottom-right")[int(rng.integers(0, 4))]
        frac = float(rng.uniform(*spec.part_fraction))
        part = _part_box(box, corner, frac)

        # Class channel over the whole body, a class-coded level in the
        # shared texture channel (keeps class identity visible in the
        # channel average), and a strong pure response on the part.
        _paint(values, cls % spec.channels, box, scale, 0.6)
        _paint(values, texture, box, scale, 0.5 + 0.7 * cls)
        _paint(values, cls % spec.channels, part, scale, 1.3)
        gts.append(GroundTruth(box, cls, part))

    label = np.zeros(spec.classes)
    for g in gts:
        label[g.class_id] = 1.0

    proposals: list[Box] = []
    for g in gts:
        for _ in range(spec.jitter_proposals):
            proposals.append(_jitter(rng, g.box, dims))
        for _ in range(spec.part_proposals):
            proposals.append(_jitter(rng, g.part, dims, rel=0.04))
    for _ in range(spec.distractors):
        for _ in range(60):
            cand = _random_box(rng, size, size * 0.12, size * 0.4)
            if all(iou(cand, g.box) < 0.08 for g in gts):
                proposals.append(cand)
                break
    if not proposals:
        proposals.append(Box(0.0, 0.0, size, size))

    return SyntheticScene(
        scene_id=seed if scene_id is None else scene_id,
        dims=dims,
        feature=FeatureMap(values, spatial_scale=scale),
        proposals=proposals,
        gt=gts,
        label=label,
    )


def generate_dataset(spec: SceneSpec, count: int, base_seed: int = 0) -> list[SyntheticScene]:
    """A list of scenes seeded (base_seed, index); training needs labels."""
    scenes = []
    for i in range(count):
        rng_seed = int(base_seed) * 1_000_003 + i
        scene = generate_scene(rng_seed, spec, scene_id=i)
        scenes.append(scene)
    return scenes
