"""RoI feature extraction: channel averaging, max pooling, oriented sequences.

A proposal and its directional extension are pooled as two independently
binned segments along the extension axis, so the pooled feature of the
extended box is exactly the concatenation of the two parts. Orientation
then turns a pooled grid into an ordered step sequence in which the
extension region is always consumed last.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cpe import tensorcore as tc
from cpe.geometry import Box, Direction
from cpe.tensorcore import Tensor

__all__ = [
    "FeatureMap",
    "PoolingSpec",
    "PooledFeature",
    "StepSequence",
    "channel_average",
    "roi_pool",
    "extension_strip",
    "pool_pair",
    "orient",
    "oriented_step_values",
]


@dataclass
class FeatureMap:
    """Per-image feature volume of shape (channels, height, width).

    ``spatial_scale`` maps pixel coordinates onto feature-grid coordinates
    (feature = pixel * scale).
    """

    values: np.ndarray
    spatial_scale: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"feature map must be C x H x W, got shape {self.values.shape}")
        if not self.spatial_scale > 0:
            raise ValueError("spatial_scale must be positive")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def channel_mean(self) -> np.ndarray:
        """H x W grid of per-cell channel averages."""
        return self.values.mean(axis=0)


@dataclass(frozen=True)
class PoolingSpec:
    """Bin counts for proposal pooling.

    ``rows`` bins span the non-extension axis, ``init_cols`` the proposal
    along the extension axis and ``ext_cols`` the extra strip, so the
    extended feature is ``init_cols + ext_cols`` steps long.
    """

    rows: int = 7
    init_cols: int = 7
    ext_cols: int = 3

    def __post_init__(self):
        if min(self.rows, self.init_cols, self.ext_cols) < 1:
            raise ValueError("pooling spec needs at least one bin per axis")

    @property
    def total_cols(self) -> int:
        return self.init_cols + self.ext_cols


@dataclass
class PooledFeature:
    """A pooled grid in spatial layout (rows down the image, cols across)."""

    values: Tensor

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass
class StepSequence:
    """Ordered per-step vectors fed to a sequence encoder."""

    steps: list
    direction: Direction = Direction.L2R

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)


def channel_average(x) -> Tensor:
    """Average a (C, H, W) volume over channels; differentiable."""
    t = x if isinstance(x, Tensor) else tc.as_tensor(x.values if isinstance(x, FeatureMap) else x)
    if t.ndim != 3:
        raise ValueError(f"channel_average expects C x H x W, got shape {t.shape}")
    return tc.mean(t, axis=0)


def _bin_ranges(lo: float, hi: float, bins: int, limit: int) -> list[tuple[int, int]]:
    """Split [lo, hi] into equal real intervals rounded outward to cells."""
    out = []
    width = (hi - lo) / bins
    for i in range(bins):
        a = int(np.floor(lo + i * width))
        b = int(np.ceil(lo + (i + 1) * width))
        a = min(max(a, 0), limit - 1)
        b = min(max(b, a + 1), limit)
        out.append((a, b))
    return out


def pool_indices(grid: np.ndarray, b: Box, out_rows: int, out_cols: int, scale: float = 1.0) -> np.ndarray:
    """Flat argmax index of each pooling bin, as an (out_rows, out_cols) array."""
    h, w = grid.shape
    x1, x2 = b.x * scale, b.x2 * scale
    y1, y2 = b.y * scale, b.y2 * scale
    x1, x2 = max(x1, 0.0), min(x2, float(w))
    y1, y2 = max(y1, 0.0), min(y2, float(h))
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"box {b} maps to an empty region on a {h}x{w} grid at scale {scale}")
    row_ranges = _bin_ranges(y1, y2, out_rows, h)
    col_ranges = _bin_ranges(x1, x2, out_cols, w)
    idx = np.empty((out_rows, out_cols), dtype=np.int64)
    for r, (r0, r1) in enumerate(row_ranges):
        for c, (c0, c1) in enumerate(col_ranges):
            window = grid[r0:r1, c0:c1]
            flat = int(np.argmax(window))
            wr, wc = divmod(flat, c1 - c0)
            idx[r, c] = (r0 + wr) * w + (c0 + wc)
    return idx


def roi_pool(grid, b: Box, out_rows: int, out_cols: int, scale: float = 1.0) -> PooledFeature:
    """Max-pool a box region of a 2-D grid onto a fixed bin layout.

    Each output cell is the max over its bin; the gradient routes only to
    the argmax cell of each bin.
    """
    t = tc.as_tensor(grid)
    if t.ndim != 2:
        raise ValueError(f"roi_pool expects a 2-D grid, got shape {t.shape}")
    idx = pool_indices(t.data, b, out_rows, out_cols, scale)
    return PooledFeature(tc.gather(t, idx))


def extension_strip(b: Box, b_ext: Box, direction: Direction) -> Box | None:
    """The extra area of an extension, or None when clamping removed it."""
    if direction is Direction.R2L:
        if b_ext.x >= b.x:
            return None
        return Box(b_ext.x, b.y, b.x - b_ext.x, b.h)
    if direction is Direction.L2R:
        if b_ext.x2 <= b.x2:
            return None
        return Box(b.x2, b.y, b_ext.x2 - b.x2, b.h)
    if direction is Direction.B2T:
        if b_ext.y >= b.y:
            return None
        return Box(b.x, b_ext.y, b.w, b.y - b_ext.y)
    if direction is Direction.T2B:
        if b_ext.y2 <= b.y2:
            return None
        return Box(b.x, b.y2, b.w, b_ext.y2 - b.y2)
    raise ValueError(f"unknown direction {direction!r}")


def pool_pair(
    grid,
    b: Box,
    b_ext: Box,
    direction: Direction,
    spec: PoolingSpec,
    scale: float = 1.0,
) -> tuple[PooledFeature, PooledFeature, PooledFeature]:
    """Pool a proposal and its extension strip, then concatenate them.

    Returns (initial, strip, extended). The extension axis of the initial
    box gets ``spec.init_cols`` bins and the strip ``spec.ext_cols`` bins;
    the extended feature is their concatenation in spatial order, so the
    identity "extended = initial : strip" holds by construction. A
    border-clamped extension yields a zero-width strip and an extended
    feature equal to the initial one.
    """
    t = tc.as_tensor(grid)
    strip_box = extension_strip(b, b_ext, direction)
    if direction.horizontal:
        init = roi_pool(t, b, spec.rows, spec.init_cols, scale)
        if strip_box is None:
            strip = PooledFeature(Tensor(np.zeros((spec.rows, 0))))
            return init, strip, init
        strip = roi_pool(t, strip_box, spec.rows, spec.ext_cols, scale)
        left, right = (strip, init) if direction is Direction.R2L else (init, strip)
        ext = PooledFeature(tc.concat([left.values, right.values], axis=1))
        return init, strip, ext

    init = roi_pool(t, b, spec.init_cols, spec.rows, scale)
    if strip_box is None:
        strip = PooledFeature(Tensor(np.zeros((0, spec.rows))))
        return init, strip, init
    strip = roi_pool(t, strip_box, spec.ext_cols, spec.rows, scale)
    top, bottom = (strip, init) if direction is Direction.B2T else (init, strip)
    ext = PooledFeature(tc.concat([top.values, bottom.values], axis=0))
    return init, strip, ext


def orient(x: PooledFeature, direction: Direction) -> StepSequence:
    """Emit pooled cells as time steps so the extension region comes last.

    T2B walks rows top to bottom (no transform), B2T bottom to top, L2R
    columns left to right, R2L columns right to left.
    """
    v = x.values
    if direction is Direction.T2B:
        steps = [tc.reshape(tc.slice_axis(v, 0, i, i + 1), (x.cols,)) for i in range(x.rows)]
    elif direction is Direction.B2T:
        steps = [tc.reshape(tc.slice_axis(v, 0, i, i + 1), (x.cols,)) for i in reversed(range(x.rows))]
    elif direction is Direction.L2R:
        steps = [tc.reshape(tc.slice_axis(v, 1, i, i + 1), (x.rows,)) for i in range(x.cols)]
    elif direction is Direction.R2L:
        steps = [tc.reshape(tc.slice_axis(v, 1, i, i + 1), (x.rows,)) for i in reversed(range(x.cols))]
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return StepSequence(steps, direction)


def _orient_array(a: np.ndarray, direction: Direction) -> np.ndarray:
    """Array form of :func:`orient`: step t is row t of the result."""
    if direction is Direction.T2B:
        return a
    if direction is Direction.B2T:
        return a[::-1]
    if direction is Direction.L2R:
        return a.T
    if direction is Direction.R2L:
        return a.T[::-1]
    raise ValueError(f"unknown direction {direction!r}")


def oriented_step_values(
    grid: np.ndarray,
    b: Box,
    b_ext: Box,
    direction: Direction,
    spec: PoolingSpec,
    scale: float = 1.0,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Oriented pooled step values for one proposal, as plain arrays.

    Returns (init_steps, strip_steps) with shapes (init_cols, rows) and
    (ext_cols, rows); strip_steps is None for a border-clamped extension.
    This is the fast path used by the detector when the feature grid is a
    constant: it shares the binning code with :func:`pool_pair` and the
    orientation transform with :func:`orient`, so both paths agree
    bit-for-bit.
    """
    strip_box = extension_strip(b, b_ext, direction)
    if direction.horizontal:
        init_idx = pool_indices(grid, b, spec.rows, spec.init_cols, scale)
        strip_idx = None if strip_box is None else pool_indices(grid, strip_box, spec.rows, spec.ext_cols, scale)
    else:
        init_idx = pool_indices(grid, b, spec.init_cols, spec.rows, scale)
        strip_idx = None if strip_box is None else pool_indices(grid, strip_box, spec.ext_cols, spec.rows, scale)
    flat = grid.ravel()
    init_steps = flat[_orient_array(init_idx, direction)]
    strip_steps = None if strip_idx is None else flat[_orient_array(strip_idx, direction)]
    return init_steps, strip_steps
