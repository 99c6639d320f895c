"""Figure rendering for the CLI report paths.

Every delimited output gets a sibling PNG: the training loss curve, the
per-class evaluation bars, and the ablation comparison.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["render_loss_curve", "render_metrics", "render_ablation"]


def render_loss_curve(curve: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    if curve:
        its = [row["iteration"] for row in curve]
        ax.plot(its, [row["total"] for row in curve], label="total", lw=1.6)
        for key in curve[0]:
            if key in ("iteration", "total"):
                continue
            ax.plot(its, [row[key] for row in curve], label=key, lw=0.9, alpha=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_metrics(table, path) -> None:
    classes = table.classes
    x = np.arange(len(classes))
    fig, ax = plt.subplots(figsize=(7, 4))
    ap = [table.ap.get(c, float("nan")) * 100.0 for c in classes]
    cl = [table.corloc.get(c, float("nan")) for c in classes]
    ax.bar(x - 0.2, ap, width=0.4, label=f"AP (mAP {table.mean_ap * 100.0:.1f})")
    ax.bar(x + 0.2, cl, width=0.4, label=f"CorLoc (mean {table.mean_corloc:.1f})")
    ax.set_xticks(x)
    ax.set_xticklabels([str(c) for c in classes])
    ax.set_xlabel("class")
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    ax.set_title("detection metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_ablation(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [row["label"] for row in rows]
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [row["map"] for row in rows], width=0.4, label="mAP")
    ax.bar(x + 0.2, [row["corloc"] for row in rows], width=0.4, label="CorLoc")
    ax2 = ax.twinx()
    ax2.plot(x, [row["top_iou"] for row in rows], "ko-", ms=4, label="top IoU")
    ax2.set_ylabel("mean top-detection IoU")
    ax2.set_ylim(0, 1.05)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("percent")
    ax.legend(loc="upper left", fontsize=8)
    ax.set_title("ablation sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
