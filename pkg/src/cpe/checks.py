"""Gradient-correctness checks used by the CLI and the acceptance suite.

Both checks compare tape gradients against central finite differences at
eps = 1e-5 and report the max relative error over every parameter entry.
"""

from __future__ import annotations

import numpy as np

from cpe import encoder as enc
from cpe import tensorcore as tc
from cpe.contrast import normalize_contrast, raw_contrast
from cpe.detector import CpeDetector, ModelConfig
from cpe.features import FeatureMap
from cpe.geometry import Box, Direction, ImageDims
from cpe.harness.scenes import GroundTruth, SyntheticScene
from cpe.tensorcore import Tensor, grad_check

__all__ = ["dcpe_grad_check", "total_loss_grad_check", "toy_model_and_scene"]


def dcpe_grad_check(eps: float = 1e-5, seed: int = 7) -> float:
    """One directional encoder pair: encode, attend, score, decode, contrast."""
    rng = np.random.default_rng(seed)
    n, classes, hf, m = 3, 2, 3, 4
    t_init, t_strip = 4, 2

    cell_params = enc.init_lstm(hf, m, rng)
    head1 = enc.init_head(m, classes, rng)
    head2 = enc.init_head(m, classes, rng)
    init_steps = [Tensor(rng.normal(size=(n, hf))) for _ in range(t_init)]
    strip_steps = [Tensor(rng.normal(size=(n, hf))) for _ in range(t_strip)]
    labels = np.array([1.0, 0.0])

    def f():
        cell = enc.CellWeights(cell_params)
        final, hiddens = enc.encode_batch(cell, init_steps, enc.zero_state(cell_params, batch=n))
        h_init = tc.stack(hiddens, axis=1)
        d_init = enc.attention_pool_batch(head1.attn, h_init)
        s_init = enc.semantic_score(head1, d_init)
        _, l1 = enc.decoder_forward(head1, d_init, labels)

        _, strip_hiddens = enc.encode_batch(cell, strip_steps, final)
        h_ext = tc.concat([h_init, tc.stack(strip_hiddens, axis=1)], axis=1)
        d_ext = enc.attention_pool_batch(head2.attn, h_ext)
        s_ext = enc.semantic_score(head2, d_ext)
        _, l2 = enc.decoder_forward(head2, d_ext, labels)

        contrast = normalize_contrast(raw_contrast(s_init, s_ext))
        return l1 + l2 + tc.sum_(contrast.values)

    params = list(cell_params.tensors().values())
    params += list(head1.tensors().values())
    params += list(head2.tensors().values())
    return grad_check(f, params, eps=eps)


def toy_model_and_scene(seed: int = 11) -> tuple[CpeDetector, object]:
    """A 3-proposal, 2-class, 2-direction toy detector on a tiny scene."""
    rng = np.random.default_rng(seed)
    config = ModelConfig(
        classes=2,
        feature_channels=2,
        mil_hidden=5,
        lstm_hidden=4,
        pool_rows=3,
        pool_init=3,
        pool_ext=2,
        k_refine=3,
        directions=(Direction.R2L, Direction.T2B),
    )
    model = CpeDetector(config, seed=seed)
    dims = ImageDims(16.0, 16.0)
    scene = SyntheticScene(
        scene_id=0,
        dims=dims,
        feature=FeatureMap(rng.normal(size=(2, 8, 8)), spatial_scale=0.5),
        proposals=[Box(2.0, 2.0, 6.0, 5.0), Box(3.0, 4.0, 4.0, 4.0), Box(9.0, 8.0, 5.0, 6.0)],
        gt=[GroundTruth(Box(2.0, 2.0, 7.0, 6.0), 0)],
        label=np.array([1.0, 0.0]),
    )
    return model, scene


def total_loss_grad_check(eps: float = 1e-5, seed: int = 11) -> float:
    """Every parameter of the toy model against the full combined loss."""
    model, scene = toy_model_and_scene(seed)
    prep = model.prepare_scene(scene)

    def f():
        return model.forward(prep, training=True).total

    params = list(dict(sorted(model.trainable_params().items())).values())
    return grad_check(f, params, eps=eps)
