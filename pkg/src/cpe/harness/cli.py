"""Command-line interface: train, eval, extend, ablate, gradcheck.

Report-producing subcommands write delimited output plus a sibling PNG
figure. The ``CPE_THREADS`` environment variable caps worker threads for
scene preparation and evaluation.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from cpe import tensorcore as tc
from cpe.detector import CpeDetector
from cpe.geometry import Direction, ImageDims, extend_box, format_box_line, read_box_file
from cpe.harness import ablate as ablate_mod
from cpe.harness import training
from cpe.harness.config import TrainConfig, load_config
from cpe.harness.metrics import evaluate_model, write_metrics_csv
from cpe.harness.scenes import generate_dataset

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a detector on synthetic scenes")
    p_train.add_argument("--config", required=True, help="flat key = value config file")
    p_train.add_argument("--out", required=True, help="checkpoint output path")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--dataset", required=True, help="dataset dir (with dataset.cfg) or a config file")
    p_eval.add_argument("--metrics", required=True, help="metrics CSV output path")

    p_ext = sub.add_parser("extend", help="print directional extensions of boxes")
    p_ext.add_argument("--boxes", required=True, help="box text file: x y w h per line")
    p_ext.add_argument("--image-dims", required=True, metavar="WxH")
    p_ext.add_argument("--t", required=True, type=float)
    p_ext.add_argument("--dir", required=True, choices=[d.value for d in Direction])
    p_ext.add_argument("--no-ratio", action="store_true", help="use w/t and h/t instead of aspect-ratio scaling")

    p_abl = sub.add_parser("ablate", help="run a config grid and tabulate metrics")
    p_abl.add_argument("--grid", required=True, help="grid file: label key=value ...")
    p_abl.add_argument("--config", help="optional base config file")
    p_abl.add_argument("--out", default="ablation.csv", help="results CSV path")

    sub.add_parser("gradcheck", help="verify model gradients against central differences")
    return parser


def _load_dataset_config(path: str) -> TrainConfig:
    if os.path.isdir(path):
        candidate = os.path.join(path, "dataset.cfg")
        if not os.path.exists(candidate):
            raise FileNotFoundError(f"dataset dir {path!r} has no dataset.cfg")
        return load_config(candidate)
    return load_config(path)


def _cmd_train(args) -> int:
    from cpe.harness.report import render_loss_curve

    cfg = load_config(args.config)
    scenes = training.build_scenes(cfg)
    result = training.train(cfg, scenes)
    result.model.save(args.out)
    training.write_loss_csv(result.curve, args.out + ".loss.csv")
    render_loss_curve(result.curve, args.out + ".loss.png")
    print(f"trained {cfg.iterations} iterations on {len(scenes)} scenes")
    print(f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    print(f"checkpoint: {args.out}")
    print(f"loss curve: {args.out}.loss.csv / .loss.png")
    return 0


def _cmd_eval(args) -> int:
    from cpe.harness.report import render_metrics

    cfg = _load_dataset_config(args.dataset)
    model = CpeDetector.load(args.ckpt)
    if model.config.classes != cfg.classes:
        raise ValueError(
            f"checkpoint has {model.config.classes} classes but dataset has {cfg.classes}"
        )
    scenes = generate_dataset(cfg.scene_spec(), cfg.scenes, base_seed=cfg.seed)
    table = evaluate_model(model, scenes, nms_iou=cfg.nms_iou)
    write_metrics_csv(table, args.metrics)
    figure = os.path.splitext(args.metrics)[0] + ".png"
    render_metrics(table, figure)
    print(f"mAP {table.mean_ap * 100.0:.2f}  CorLoc {table.mean_corloc:.2f}  top-IoU {table.top_iou:.4f}")
    print(f"metrics: {args.metrics} / {figure}")
    return 0


def _cmd_extend(args) -> int:
    try:
        w_str, h_str = args.image_dims.lower().split("x")
        dims = ImageDims(float(w_str), float(h_str))
    except ValueError as e:
        raise SystemExit(f"bad --image-dims {args.image_dims!r}: expected WxH") from e
    direction = Direction(args.dir)
    for box, class_id, score in read_box_file(args.boxes):
        ext = extend_box(box, direction, dims, args.t, use_aspect_ratio=not args.no_ratio)
        print(format_box_line(ext, class_id, score))
    return 0


def _cmd_ablate(args) -> int:
    from cpe.harness.report import render_ablation

    with open(args.grid) as fh:
        rows = ablate_mod.parse_grid(fh.read())
    base = load_config(args.config) if args.config else None
    results = ablate_mod.run_grid(rows, base)
    ablate_mod.write_ablation_csv(results, args.out)
    figure = os.path.splitext(args.out)[0] + ".png"
    if results:
        render_ablation(results, figure)
    for row in results:
        print(f"{row['label']}: mAP {row['map']:.2f}  CorLoc {row['corloc']:.2f}  top-IoU {row['top_iou']:.4f}")
    print(f"results: {args.out}" + (f" / {figure}" if results else ""))
    return 0


def _cmd_gradcheck(args) -> int:
    from cpe.checks import dcpe_grad_check, total_loss_grad_check

    err_dcpe = dcpe_grad_check()
    print(f"D-CPE forward + semantic score + decoder loss: max rel error {err_dcpe:.3e}")
    err_total = total_loss_grad_check()
    print(f"full total loss (toy model): max rel error {err_total:.3e}")
    ok = err_dcpe < 1e-4 and err_total < 1e-4
    print("gradcheck " + ("PASS" if ok else "FAIL") + " (tolerance 1e-4)")
    return 0 if ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "extend": _cmd_extend,
        "ablate": _cmd_ablate,
        "gradcheck": _cmd_gradcheck,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
