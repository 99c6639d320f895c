"""SGD training loop over prepared synthetic scenes.

One scene per step (minibatch size 1), momentum plus decoupled weight
decay on the weight matrices, and a single ten-fold learning-rate drop
partway through. The loop is strictly sequential so a fixed seed gives a
bit-identical loss curve.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from cpe.detector import CpeDetector
from cpe.harness.config import TrainConfig
from cpe.harness.metrics import worker_threads
from cpe.harness.scenes import SyntheticScene, generate_dataset
from cpe.tensorcore import Tape

__all__ = ["TrainResult", "train", "prepare_scenes", "build_scenes"]


@dataclass
class TrainResult:
    model: CpeDetector
    curve: list[dict]

    @property
    def initial_loss(self) -> float:
        return self.curve[0]["total"] if self.curve else float("nan")

    @property
    def final_loss(self) -> float:
        return self.curve[-1]["total"] if self.curve else float("nan")


def build_scenes(cfg: TrainConfig) -> list[SyntheticScene]:
    scenes = generate_dataset(cfg.scene_spec(), cfg.scenes, base_seed=cfg.seed)
    unusable = [s.scene_id for s in scenes if not np.asarray(s.label).any()]
    if unusable:
        raise ValueError(f"scenes without any positive label are unusable for training: {unusable}")
    return scenes


def prepare_scenes(model: CpeDetector, scenes) -> list:
    ordered = sorted(scenes, key=lambda s: s.scene_id)
    threads = worker_threads()
    if threads == 1 or len(ordered) <= 1:
        return [model.prepare_scene(s) for s in ordered]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(model.prepare_scene, ordered))


def train(cfg: TrainConfig, scenes=None, model: CpeDetector | None = None) -> TrainResult:
    """Train a detector; aborts with a diagnostic if the loss diverges."""
    if scenes is None:
        scenes = build_scenes(cfg)
    if model is None:
        model = CpeDetector(cfg.model_config(), seed=cfg.seed)
    prepared = prepare_scenes(model, scenes)
    if not prepared:
        raise ValueError("training needs at least one scene")

    params = dict(sorted(model.trainable_params().items()))
    velocity = {name: np.zeros_like(t.data) for name, t in params.items()}
    curve: list[dict] = []

    lr = cfg.lr
    for it in range(cfg.iterations):
        if it == cfg.lr_drop_at:
            lr = cfg.lr * 0.1
        prep = prepared[it % len(prepared)]
        with Tape() as tape:
            out = model.forward(prep, training=True)
        total = float(out.total.data)
        if not np.isfinite(total):
            raise RuntimeError(
                f"training diverged at iteration {it} on scene {prep.scene_id}: total loss {total}"
            )
        tape.backward(out.total)

        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = velocity[name]
            v *= cfg.momentum
            v += g
            p.data = p.data - lr * v
            if p.data.ndim >= 2 and cfg.weight_decay:
                # decoupled decay, weights only: biases and gains stay free
                p.data = p.data - lr * cfg.weight_decay * p.data
            p.grad = None

        row = {
            "iteration": it,
            "total": total,
            "l_cpe": float(out.l_cpe.data),
            "l_w": float(out.l_w.data),
        }
        for k, lk in enumerate(out.l_r):
            row[f"l_r{k + 1}"] = float(lk.data)
        curve.append(row)

    return TrainResult(model=model, curve=curve)


def write_loss_csv(curve: list[dict], path) -> None:
    if not curve:
        with open(path, "w") as fh:
            fh.write("iteration,total\n")
        return
    keys = list(curve[0].keys())
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in curve:
            fh.write(",".join(f"{row[k]:.6f}" if k != "iteration" else str(row[k]) for k in keys) + "\n")
