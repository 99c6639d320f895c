"""Axis-aligned box arithmetic: directional extension, IoU, clipping.

Boxes use the left-top (x, y, w, h) convention with continuous real
coordinates. Directional extension grows exactly one border of a box,
scaled by the box aspect ratio, and clamps at the image border.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

__all__ = [
    "Box",
    "Direction",
    "ImageDims",
    "area",
    "clip_box",
    "extend_box",
    "iou",
    "format_box_line",
    "parse_box_line",
    "read_box_file",
    "write_box_file",
]


class Direction(Enum):
    """Scan direction of a proposal extension.

    The name is the order in which the box is traversed; the new area is
    appended at the destination end of the scan (R2L grows the left
    border, L2R the right, T2B the bottom, B2T the top).
    """

    R2L = "r2l"
    L2R = "l2r"
    T2B = "t2b"
    B2T = "b2t"

    @property
    def horizontal(self) -> bool:
        return self in (Direction.R2L, Direction.L2R)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with strictly positive width and height."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"box field {name} must be finite, got {v!r}")
            object.__setattr__(self, name, v)
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs w > 0 and h > 0, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h


@dataclass(frozen=True)
class ImageDims:
    """Width and height of the image a box lives in."""

    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image dims must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "width", float(self.width))
        object.__setattr__(self, "height", float(self.height))

    def contains(self, b: Box) -> bool:
        return b.x >= 0 and b.y >= 0 and b.x2 <= self.width and b.y2 <= self.height


def area(b: Box) -> float:
    return b.w * b.h


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area(a) + area(b) - inter)


def clip_box(b: Box, img: ImageDims) -> Box:
    """Largest sub-box of ``b`` inside ``img``.

    Raises ValueError when the box lies entirely outside the image.
    """
    x1 = max(b.x, 0.0)
    y1 = max(b.y, 0.0)
    x2 = min(b.x2, img.width)
    y2 = min(b.y2, img.height)
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"box {b} does not intersect image {img.width}x{img.height}")
    return Box(x1, y1, x2 - x1, y2 - y1)


def _anchored_extent(lo: float, target: float) -> float | None:
    """Extent ``e`` with fl(lo + e) == target exactly, or None.

    Float addition is not associative, so e = target - lo can land a ulp
    off and, around round-to-even ties, single-ulp nudges of e can step
    the sum right over the target. A handful of nudges either hits the
    target or proves this anchor cannot reach it.
    """
    e = target - lo
    for _ in range(8):
        s = lo + e
        if s == target:
            return e if e > 0 else None
        e = math.nextafter(e, -math.inf if s > target else math.inf)
    return None


def _grow_low(anchor: float, stop: float, target: float, floor: float) -> tuple[float, float] | None:
    """Move a low edge from ``stop`` down toward ``anchor``.

    Returns (new_low, extent) with floor <= new_low < stop and
    fl(new_low + extent) == target bit-exactly, or None when no
    representable extension exists.
    """
    lo = max(anchor, floor)
    for _ in range(8):
        if lo >= stop:
            return None
        e = _anchored_extent(lo, target)
        if e is not None:
            return lo, e
        lo = math.nextafter(lo, math.inf)
    return None


def _grow_high(low: float, old_extent: float, want: float, limit: float) -> float:
    """Grow an extent so the high edge moves from fl(low + old_extent)
    toward ``want`` without passing ``limit``.

    The returned extent e keeps fl(low + old_extent) <= fl(low + e)
    <= limit; when the limit corner is unreachable the original extent is
    kept (no extension).
    """
    old_high = low + old_extent
    e = max(min(limit - low, want), old_extent)
    for _ in range(16):
        if low + e > limit:
            e = math.nextafter(e, -math.inf)
            continue
        break
    for _ in range(4):
        if low + e < old_high:
            e = math.nextafter(e, math.inf)
            continue
        break
    if old_high <= low + e <= limit:
        return e
    return old_extent


def extend_box(
    b: Box,
    direction: Direction,
    img: ImageDims,
    t: float,
    use_aspect_ratio: bool = True,
) -> Box:
    """Grow one border of ``b`` by its aspect-ratio-scaled extension length.

    The horizontal extension length is w^2 / (h * t) and the vertical one
    h^2 / (w * t); with ``use_aspect_ratio`` off both collapse to w/t and
    h/t. The result always contains ``b``, stays inside ``img``, and
    leaves the two coordinates orthogonal to the direction untouched.
    Clamping at the image border can shorten the extension down to zero,
    in which case the box is returned unchanged.
    """
    if not t > 1:
        raise ValueError(f"extension coefficient t must be > 1, got {t}")
    if not img.contains(b):
        raise ValueError(f"box {b} lies outside image {img.width}x{img.height}")
    t = float(t)
    if use_aspect_ratio:
        # Factored as (w/h)*(w/t) so square boxes get exactly w/t.
        ext_w = (b.w / b.h) * (b.w / t)
        ext_h = (b.h / b.w) * (b.h / t)
    else:
        ext_w = b.w / t
        ext_h = b.h / t

    if direction is Direction.R2L:
        grown = _grow_low(b.x - ext_w, b.x, b.x2, 0.0)
        return b if grown is None else Box(grown[0], b.y, grown[1], b.h)
    if direction is Direction.L2R:
        return Box(b.x, b.y, _grow_high(b.x, b.w, ext_w + b.w, img.width), b.h)
    if direction is Direction.B2T:
        grown = _grow_low(b.y - ext_h, b.y, b.y2, 0.0)
        return b if grown is None else Box(b.x, grown[0], b.w, grown[1])
    if direction is Direction.T2B:
        return Box(b.x, b.y, b.w, _grow_high(b.y, b.h, ext_h + b.h, img.height))
    raise ValueError(f"unknown direction {direction!r}")


def format_box_line(b: Box, class_id: int | None = None, score: float | None = None) -> str:
    """One-box text record: ``x y w h [class_id] [score]``."""
    parts = [f"{b.x:.6f}", f"{b.y:.6f}", f"{b.w:.6f}", f"{b.h:.6f}"]
    if class_id is not None:
        parts.append(str(int(class_id)))
        if score is not None:
            parts.append(f"{score:.6f}")
    return " ".join(parts)


def parse_box_line(line: str) -> tuple[Box, int | None, float | None]:
    fields = line.split()
    if len(fields) not in (4, 5, 6):
        raise ValueError(f"box line needs 4 to 6 fields, got {len(fields)}: {line!r}")
    x, y, w, h = (float(v) for v in fields[:4])
    class_id = int(fields[4]) if len(fields) >= 5 else None
    score = float(fields[5]) if len(fields) == 6 else None
    return Box(x, y, w, h), class_id, score


def read_box_file(path) -> list[tuple[Box, int | None, float | None]]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                out.append(parse_box_line(line))
    return out


def write_box_file(path, records) -> None:
    with open(path, "w") as fh:
        for b, class_id, score in records:
            fh.write(format_box_line(b, class_id, score) + "\n")
