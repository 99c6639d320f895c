"""Dual-stream MIL scoring, contrast fusion, and online refinement.

The basic detector scores each proposal with a classification stream
(softmax over classes) and a detection stream (softmax over proposals);
their product summed over proposals yields image-level class scores
trained against the image labels. Fused contrast scores enter both
streams through single linear layers initialized to a block identity, so
training starts exactly at the plain dual-stream baseline. Refinement
branches are trained on pseudo-labels seeded by the previous stage's
top-scoring proposal per present class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cpe import tensorcore as tc
from cpe.contrast import ContrastMatrix
from cpe.geometry import Box, iou
from cpe.tensorcore import Tensor

__all__ = [
    "MilParams",
    "ScoreBundle",
    "init_mil",
    "check_image_label",
    "mil_hidden",
    "mil_streams",
    "stream_logits",
    "fuse_semantics",
    "proposal_and_image_scores",
    "wsddn_loss",
    "refine_labels",
    "refine_forward",
    "refinement_loss",
    "total_loss",
]


@dataclass
class MilParams:
    """Shared proposal-feature stack, stream heads, fusion and refinement."""

    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    cls_w: Tensor
    cls_b: Tensor
    dec_w: Tensor
    dec_b: Tensor
    fuse_cls_w: Tensor
    fuse_cls_b: Tensor
    fuse_dec_w: Tensor
    fuse_dec_b: Tensor
    refine_w: list[Tensor]
    refine_b: list[Tensor]

    @property
    def k_refine(self) -> int:
        return len(self.refine_w)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for name in (
            "fc1_w", "fc1_b", "fc2_w", "fc2_b", "cls_w", "cls_b", "dec_w", "dec_b",
            "fuse_cls_w", "fuse_cls_b", "fuse_dec_w", "fuse_dec_b",
        ):
            out[name] = getattr(self, name)
        for k, (w, b) in enumerate(zip(self.refine_w, self.refine_b)):
            out[f"refine{k}_w"] = w
            out[f"refine{k}_b"] = b
        return out


@dataclass
class ScoreBundle:
    """All per-forward score matrices, kept for inspection and tests."""

    x_cls: Tensor
    x_dec: Tensor
    x_rcls: Tensor
    x_rdec: Tensor
    x_s: Tensor
    sigma: Tensor
    phi: list[Tensor]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_mil(feature_dim: int, hidden: int, classes: int, k_refine: int, rng: np.random.Generator) -> MilParams:
    """Initialize the MIL stack; fusion layers start as [identity | 0]."""
    c = classes
    fuse_block = np.concatenate([np.eye(c), np.zeros((c, c))], axis=1)
    return MilParams(
        fc1_w=_uniform(rng, (hidden, feature_dim), feature_dim),
        fc1_b=Tensor(np.zeros(hidden), requires_grad=True),
        fc2_w=_uniform(rng, (hidden, hidden), hidden),
        fc2_b=Tensor(np.zeros(hidden), requires_grad=True),
        cls_w=_uniform(rng, (c, hidden), hidden),
        cls_b=Tensor(np.zeros(c), requires_grad=True),
        dec_w=_uniform(rng, (c, hidden), hidden),
        dec_b=Tensor(np.zeros(c), requires_grad=True),
        fuse_cls_w=Tensor(fuse_block.copy(), requires_grad=True),
        fuse_cls_b=Tensor(np.zeros(c), requires_grad=True),
        fuse_dec_w=Tensor(fuse_block.copy(), requires_grad=True),
        fuse_dec_b=Tensor(np.zeros(c), requires_grad=True),
        refine_w=[_uniform(rng, (c + 1, hidden), hidden) for _ in range(k_refine)],
        refine_b=[Tensor(np.zeros(c + 1), requires_grad=True) for _ in range(k_refine)],
    )


def check_image_label(y, training: bool = False) -> np.ndarray:
    """Validate a {0,1} image-label vector; training needs a positive."""
    y = np.asarray(tc.as_tensor(y).data, dtype=np.float64)
    if y.ndim != 1 or not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("image label must be a binary vector")
    if training and not y.any():
        raise ValueError("training images need at least one positive class")
    return y


def mil_hidden(features: Tensor, p: MilParams) -> Tensor:
    """Shared two-layer proposal representation."""
    h = tc.tanh(features @ tc.transpose(p.fc1_w) + p.fc1_b)
    return tc.tanh(h @ tc.transpose(p.fc2_w) + p.fc2_b)


def stream_logits(hidden: Tensor, p: MilParams) -> tuple[Tensor, Tensor]:
    """Classification and detection logits from the shared representation."""
    return (
        hidden @ tc.transpose(p.cls_w) + p.cls_b,
        hidden @ tc.transpose(p.dec_w) + p.dec_b,
    )


def mil_streams(features: Tensor, p: MilParams) -> tuple[Tensor, Tensor]:
    """Raw N x C classification and detection logits for each proposal."""
    return stream_logits(mil_hidden(features, p), p)


def fuse_semantics(x_cls: Tensor, x_dec: Tensor, n, p: MilParams) -> tuple[Tensor, Tensor]:
    """Mix contrast scores into both streams through single linear layers."""
    nv = n.values if isinstance(n, ContrastMatrix) else tc.as_tensor(n)
    if nv.shape != x_cls.shape or x_cls.shape != x_dec.shape:
        raise ValueError("stream and contrast shapes must agree")
    x_rcls = tc.concat([x_cls, nv], axis=1) @ tc.transpose(p.fuse_cls_w) + p.fuse_cls_b
    x_rdec = tc.concat([x_dec, nv], axis=1) @ tc.transpose(p.fuse_dec_w) + p.fuse_dec_b
    return x_rcls, x_rdec


def proposal_and_image_scores(x_rcls: Tensor, x_rdec: Tensor) -> tuple[Tensor, Tensor]:
    """Per-proposal scores and their per-class sums.

    x_s = softmax over classes * softmax over proposals; summing over
    proposals bounds every image score in [0, 1].
    """
    x_s = tc.softmax_rows(x_rcls) * tc.softmax_cols(x_rdec)
    sigma = tc.sum_(x_s, axis=0)
    return x_s, sigma


def wsddn_loss(sigma: Tensor, y) -> Tensor:
    """Multi-class binary cross entropy on image scores."""
    return tc.binary_cross_entropy(sigma, check_image_label(y))


def refine_labels(prev_scores: np.ndarray, boxes: list[Box], y, tau: float) -> np.ndarray:
    """Pseudo-label proposals from the previous stage's scores.

    For every class present in the image the top-scoring proposal becomes
    a seed; proposals overlapping a seed with IoU > tau take that seed's
    class (the most-overlapping seed wins, ties to the lower class index)
    and everything else is background (index C). Scores are consumed as a
    value snapshot, so the labels are detached from the graph.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    y = check_image_label(y, training=True)
    scores = np.asarray(prev_scores, dtype=np.float64)
    n, c = scores.shape[0], y.shape[0]
    if scores.shape[1] < c:
        raise ValueError("scores must cover every class")
    if len(boxes) != n:
        raise ValueError("one box per score row required")
    labels = np.full(n, c, dtype=np.int64)
    best_overlap = np.zeros(n)
    for cls in range(c):
        if y[cls] != 1.0:
            continue
        seed = boxes[int(np.argmax(scores[:, cls]))]
        for i, b in enumerate(boxes):
            ov = iou(b, seed)
            if ov > tau and ov > best_overlap[i]:
                best_overlap[i] = ov
                labels[i] = cls
    return labels


def refine_forward(hidden: Tensor, p: MilParams) -> list[Tensor]:
    """Per-branch class-plus-background distributions over proposals."""
    return [
        tc.softmax_rows(hidden @ tc.transpose(w) + b)
        for w, b in zip(p.refine_w, p.refine_b)
    ]


def refinement_loss(phi_k: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of one refinement branch against hard labels."""
    n, c1 = phi_k.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError("one label per proposal required")
    if labels.min() < 0 or labels.max() >= c1:
        raise ValueError(f"labels must lie in [0, {c1 - 1}]")
    onehot = np.zeros((n, c1))
    onehot[np.arange(n), labels] = 1.0
    picked = tc.sum_(tc.log(tc.clamp(phi_k, 1e-12, 1.0)) * onehot)
    return picked * (-1.0 / n)


def total_loss(l_cpe, l_w, l_r) -> Tensor:
    """Unweighted sum of the contrast, image, and refinement losses."""
    total = tc.as_tensor(l_cpe) + tc.as_tensor(l_w)
    for lk in l_r:
        total = total + tc.as_tensor(lk)
    if not np.isfinite(total.data).all():
        raise ValueError("total loss is not finite")
    return total
