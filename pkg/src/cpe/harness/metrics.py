"""Detection evaluation: NMS, average precision, CorLoc, top-IoU.

AP follows the standard protocol: detections matched greedily to ground
truth by descending score at IoU > 0.5, each ground truth used once, and
the area under the all-points interpolated precision-recall curve.
CorLoc counts the positive images whose single best-scored box for a
class overlaps a ground truth of that class.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from cpe.geometry import Box, iou

__all__ = [
    "Detection",
    "MetricsTable",
    "nms",
    "average_precision",
    "corloc",
    "mean_top_iou",
    "score_scenes",
    "evaluate_model",
    "worker_threads",
    "write_metrics_csv",
]


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    scene_id: int = 0


@dataclass
class MetricsTable:
    classes: list[int]
    ap: dict[int, float]          # fraction in [0, 1]; NaN when undefined
    corloc: dict[int, float]      # percentage in [0, 100]; NaN when undefined
    top_iou_class: dict[int, float]
    mean_ap: float
    mean_corloc: float
    top_iou: float


def worker_threads() -> int:
    """Worker-thread cap from CPE_THREADS (default 1)."""
    raw = os.environ.get("CPE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy descending-score suppression at IoU > threshold.

    Class-agnostic; apply it per class. Ties in score keep input order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(iou(d.box, k.box) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


def average_precision(
    dets: list[Detection],
    gts: list[tuple[int, Box, int]],
    iou_thresh: float = 0.5,
) -> tuple[dict[int, float], float]:
    """Per-class AP and its mean over classes that have ground truth.

    ``gts`` rows are (scene_id, box, class_id). Classes without ground
    truth get NaN and are excluded from the mean.
    """
    classes = sorted({c for _, _, c in gts} | {d.class_id for d in dets})
    ap: dict[int, float] = {}
    for cls in classes:
        gt_cls = [(s, b) for s, b, c in gts if c == cls]
        if not gt_cls:
            ap[cls] = float("nan")
            continue
        det_cls = sorted(
            (d for d in dets if d.class_id == cls),
            key=lambda d: (-d.score, d.scene_id),
        )
        matched = [False] * len(gt_cls)
        tp = np.zeros(len(det_cls))
        fp = np.zeros(len(det_cls))
        for i, d in enumerate(det_cls):
            best, best_j = 0.0, -1
            for j, (s, b) in enumerate(gt_cls):
                if s != d.scene_id or matched[j]:
                    continue
                ov = iou(d.box, b)
                if ov > best:
                    best, best_j = ov, j
            if best > iou_thresh:
                matched[best_j] = True
                tp[i] = 1.0
            else:
                fp[i] = 1.0
        if len(det_cls) == 0:
            ap[cls] = 0.0
            continue
        ctp, cfp = np.cumsum(tp), np.cumsum(fp)
        recall = ctp / len(gt_cls)
        precision = ctp / np.maximum(ctp + cfp, 1e-12)
        # all-points interpolation: integrate the precision envelope
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        for i in range(len(mpre) - 2, -1, -1):
            mpre[i] = max(mpre[i], mpre[i + 1])
        steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
        ap[cls] = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    valid = [v for v in ap.values() if not np.isnan(v)]
    return ap, float(np.mean(valid)) if valid else 0.0


def corloc(scene_rows: list[tuple], classes: int) -> tuple[dict[int, float], float]:
    """Per-class CorLoc percentage over positive images.

    ``scene_rows`` holds (scene, scores) pairs with scores of shape N x C.
    An image counts as correctly localized for class c when the
    top-scoring proposal for c has IoU > 0.5 with some ground truth of c.
    """
    hits = np.zeros(classes)
    totals = np.zeros(classes)
    for scene, scores in scene_rows:
        for cls in range(classes):
            if scene.label[cls] != 1.0:
                continue
            totals[cls] += 1
            top = scene.proposals[int(np.argmax(scores[:, cls]))]
            if any(g.class_id == cls and iou(top, g.box) > 0.5 for g in scene.gt):
                hits[cls] += 1
    per_class = {
        c: (100.0 * hits[c] / totals[c]) if totals[c] else float("nan")
        for c in range(classes)
    }
    valid = [v for v in per_class.values() if not np.isnan(v)]
    return per_class, float(np.mean(valid)) if valid else 0.0


def top_iou_by_class(scene_rows: list[tuple], classes: int) -> tuple[dict[int, float], float]:
    """Top box IoU per positive (scene, class) pair, averaged per class."""
    vals: dict[int, list[float]] = {c: [] for c in range(classes)}
    for scene, scores in scene_rows:
        for cls, present in enumerate(scene.label):
            if present != 1.0:
                continue
            top = scene.proposals[int(np.argmax(scores[:, cls]))]
            same = [iou(top, g.box) for g in scene.gt if g.class_id == cls]
            vals[int(cls)].append(max(same) if same else 0.0)
    per_class = {c: (float(np.mean(v)) if v else float("nan")) for c, v in vals.items()}
    flat = [x for v in vals.values() for x in v]
    return per_class, float(np.mean(flat)) if flat else 0.0


def mean_top_iou(scene_rows: list[tuple]) -> float:
    """Mean over positive (scene, class) pairs of the top box's best IoU."""
    classes = max((len(scene.label) for scene, _ in scene_rows), default=0)
    return top_iou_by_class(scene_rows, classes)[1]


def score_scenes(model, scenes) -> list[tuple]:
    """Detection scores per scene, in scene order, optionally threaded."""
    ordered = sorted(scenes, key=lambda s: s.scene_id)

    def run(scene):
        prep = model.prepare_scene(scene)
        return scene, model.detection_scores(prep)

    threads = worker_threads()
    if threads == 1 or len(ordered) <= 1:
        return [run(s) for s in ordered]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, ordered))


def evaluate_model(model, scenes, nms_iou: float = 0.3) -> MetricsTable:
    """Score a dataset and produce the full metrics table."""
    classes = model.config.classes
    rows = score_scenes(model, scenes)

    dets: list[Detection] = []
    gts: list[tuple[int, Box, int]] = []
    for scene, scores in rows:
        gts.extend((scene.scene_id, g.box, g.class_id) for g in scene.gt)
        for cls in range(classes):
            cand = [
                Detection(b, cls, float(scores[i, cls]), scene.scene_id)
                for i, b in enumerate(scene.proposals)
            ]
            dets.extend(nms(cand, nms_iou))

    ap, mean_ap = average_precision(dets, gts)
    per_corloc, mean_cl = corloc(rows, classes)
    per_top, mean_top = top_iou_by_class(rows, classes)
    for cls in range(classes):
        ap.setdefault(cls, float("nan"))
    return MetricsTable(
        classes=list(range(classes)),
        ap=ap,
        corloc=per_corloc,
        top_iou_class=per_top,
        mean_ap=mean_ap,
        mean_corloc=mean_cl,
        top_iou=mean_top,
    )


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.6f}"


def write_metrics_csv(table: MetricsTable, path) -> None:
    """Header row, one row per class (percentages), and a mean row."""
    lines = ["class,ap,corloc,top_iou"]
    nan = float("nan")
    for cls in table.classes:
        lines.append(
            f"{cls},{_fmt(table.ap.get(cls, nan) * 100.0)},"
            f"{_fmt(table.corloc.get(cls, nan))},{_fmt(table.top_iou_class.get(cls, nan))}"
        )
    lines.append(f"mean,{_fmt(table.mean_ap * 100.0)},{_fmt(table.mean_corloc)},{_fmt(table.top_iou)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
