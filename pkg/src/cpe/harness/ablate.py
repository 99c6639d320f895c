"""Config-grid sweeps over the synthetic benchmark.

A grid file holds one configuration per line: a label followed by
``key=value`` overrides applied on top of a base config. Every row trains
and evaluates on the dataset implied by its own config, so rows sharing
the seed and scene keys compare on identical scenes.
"""

from __future__ import annotations

from cpe.harness.config import TrainConfig, loads_config
from cpe.harness.metrics import evaluate_model
from cpe.harness.training import build_scenes, train

__all__ = ["parse_grid", "run_grid", "write_ablation_csv"]


def parse_grid(text: str) -> list[tuple[str, dict]]:
    """Grid rows: ``label key=value key=value ...`` (one per line)."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        label = parts[0]
        overrides = {}
        for token in parts[1:]:
            if "=" not in token:
                raise ValueError(f"grid line {lineno}: expected key=value, got {token!r}")
            key, value = token.split("=", 1)
            overrides[key.strip()] = value.strip()
        rows.append((label, overrides))
    return rows


def run_grid(rows: list[tuple[str, dict]], base: TrainConfig | None = None) -> list[dict]:
    """Train and evaluate one model per grid row."""
    results = []
    base_text = ""
    if base is not None:
        from cpe.harness.config import dumps_config

        base_text = dumps_config(base)
    for label, overrides in rows:
        cfg = loads_config(base_text, overrides)
        scenes = build_scenes(cfg)
        outcome = train(cfg, scenes)
        table = evaluate_model(outcome.model, scenes, nms_iou=cfg.nms_iou)
        results.append(
            {
                "label": label,
                "map": table.mean_ap * 100.0,
                "corloc": table.mean_corloc,
                "top_iou": table.top_iou,
                "final_loss": outcome.final_loss,
            }
        )
    return results


def write_ablation_csv(results: list[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write("label,map,corloc,top_iou,final_loss\n")
        for row in results:
            fh.write(
                f"{row['label']},{row['map']:.6f},{row['corloc']:.6f},"
                f"{row['top_iou']:.6f},{row['final_loss']:.6f}\n"
            )
