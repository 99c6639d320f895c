"""Contrastive integrity scores: normalize per-direction contrasts and fuse.

The absolute difference between the semantic scores of a proposal and of
its extension is min-max normalized over the whole per-image matrix, then
the four directions are combined with a horizontal/vertical weighting.
A large fused value marks a proposal whose surroundings look semantically
different, i.e. one that already covers a complete object.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from cpe import tensorcore as tc
from cpe.tensorcore import Tensor

__all__ = [
    "ContrastMatrix",
    "FusionConfig",
    "raw_contrast",
    "normalize_contrast",
    "fuse_directions",
    "cpe_loss",
    "dump_contrast_csv",
]


@dataclass
class ContrastMatrix:
    """N x C contrast values tagged with their source direction."""

    values: Tensor
    tag: str = "fused"


@dataclass(frozen=True)
class FusionConfig:
    """Direction-coupling weight and the degenerate-range cutoff."""

    alpha: float = 0.5
    epsilon: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def _values(x) -> Tensor:
    return x.values if isinstance(x, ContrastMatrix) else tc.as_tensor(x)


def raw_contrast(s_b, s_bl) -> Tensor:
    """Elementwise |initial - extended| semantic score difference."""
    s_b, s_bl = tc.as_tensor(s_b), tc.as_tensor(s_bl)
    if s_b.shape != s_bl.shape:
        raise ValueError(f"score shapes differ: {s_b.shape} vs {s_bl.shape}")
    return tc.absolute(s_b - s_bl)


def normalize_contrast(raw, eps: float = 1e-12, tag: str = "fused") -> ContrastMatrix:
    """Min-max normalize a nonnegative matrix over all its entries.

    The min and max route gradients to their achieving entries (first one
    on ties), so the backward pass is the exact derivative almost
    everywhere. When the range collapses below ``eps`` the whole matrix
    maps to zeros: identical scores carry no contrast evidence.
    """
    raw = tc.as_tensor(raw)
    lo_idx = int(np.argmin(raw.data))
    hi_idx = int(np.argmax(raw.data))
    span = float(raw.data.ravel()[hi_idx] - raw.data.ravel()[lo_idx])
    if span < eps:
        return ContrastMatrix(Tensor(np.zeros(raw.shape)), tag)
    lo = tc.gather(raw, np.asarray(lo_idx))
    hi = tc.gather(raw, np.asarray(hi_idx))
    return ContrastMatrix((raw - lo) * tc.reciprocal(hi - lo), tag)


def fuse_directions(n_l, n_r, n_b, n_t, cfg: FusionConfig) -> ContrastMatrix:
    """alpha-weighted sum: alpha(L + R) + (1 - alpha)(B + T)."""
    vl, vr, vb, vt = (_values(n) for n in (n_l, n_r, n_b, n_t))
    for v in (vr, vb, vt):
        if v.shape != vl.shape:
            raise ValueError("direction matrices must share one shape")
    fused = (vl + vr) * cfg.alpha + (vb + vt) * (1.0 - cfg.alpha)
    return ContrastMatrix(fused, "fused")


def cpe_loss(pairs) -> Tensor:
    """Average over directions of the summed encoder-pair decoder losses.

    ``pairs`` holds one (initial, extended) decoder loss pair per enabled
    direction; with all four directions this is exactly the four-way mean.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cpe_loss needs at least one direction pair")
    total = None
    for l1, l2 in pairs:
        l1, l2 = tc.as_tensor(l1), tc.as_tensor(l2)
        if not (np.isfinite(l1.data).all() and np.isfinite(l2.data).all()):
            raise ValueError("decoder losses must be finite")
        term = l1 + l2
        total = term if total is None else total + term
    return total * (1.0 / len(pairs))


def dump_contrast_csv(path, s_b: dict, s_bl: dict, n_dir: dict, fused: np.ndarray) -> None:
    """Debug dump of per-direction scores and contrasts, one row per entry."""
    directions = sorted(s_b)
    header = ["proposal_id", "class_id"]
    for d in directions:
        header += [f"s_b_{d}", f"s_bl_{d}", f"n_{d}"]
    header.append("n_fused")
    n, c = fused.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(n):
            for j in range(c):
                row = [i, j]
                for d in directions:
                    row += [f"{s_b[d][i, j]:.6f}", f"{s_bl[d][i, j]:.6f}", f"{n_dir[d][i, j]:.6f}"]
                row.append(f"{fused[i, j]:.6f}")
                writer.writerow(row)
