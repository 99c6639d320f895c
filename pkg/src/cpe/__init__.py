"""Contrastive proposal extension for weakly supervised object detection.

A desk-scale implementation: box geometry, a small reverse-mode tensor
engine, RoI feature sequencing, LSTM-based contrastive scoring, a
dual-stream MIL detector with online refinement, and a synthetic-scene
training/evaluation harness.
"""

from cpe.geometry import Box, Direction, ImageDims, area, clip_box, extend_box, iou

__all__ = [
    "Box",
    "Direction",
    "ImageDims",
    "area",
    "clip_box",
    "extend_box",
    "iou",
]

__version__ = "0.1.0"
