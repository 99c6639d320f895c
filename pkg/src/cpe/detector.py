"""The assembled detector: MIL streams coupled to directional contrast.

One forward pass pools every proposal for the MIL stack, runs each
enabled direction's encoder pair over the oriented step sequences of the
channel-averaged feature map, fuses the normalized contrasts into the
stream logits, and cascades the refinement branches. Proposal pooling
depends only on constant scene data, so it is computed once per scene and
reused across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from cpe import encoder as enc
from cpe import mil
from cpe import tensorcore as tc
from cpe.contrast import ContrastMatrix, FusionConfig, cpe_loss, fuse_directions, normalize_contrast, raw_contrast
from cpe.features import FeatureMap, PoolingSpec, oriented_step_values, pool_indices
from cpe.geometry import Box, Direction, ImageDims, extend_box
from cpe.tensorcore import Tensor

__all__ = ["ModelConfig", "CpeDetector", "ForwardResult", "PreparedScene"]

ALL_DIRECTIONS = (Direction.R2L, Direction.L2R, Direction.T2B, Direction.B2T)


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a detector from scratch."""

    classes: int = 4
    feature_channels: int = 6
    mil_hidden: int = 48
    lstm_hidden: int = 16
    pool_rows: int = 7
    pool_init: int = 7
    pool_ext: int = 3
    t: float = 4.0
    alpha: float = 0.5
    contrast_eps: float = 1e-12
    k_refine: int = 3
    tau: float = 0.1
    directions: tuple[Direction, ...] = ALL_DIRECTIONS
    use_aspect_ratio: bool = True
    cpe_enabled: bool = True

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.cpe_enabled and not self.directions:
            raise ValueError("contrast needs at least one direction")
        if self.k_refine < 1:
            raise ValueError("need at least one refinement branch")

    @property
    def pooling(self) -> PoolingSpec:
        return PoolingSpec(self.pool_rows, self.pool_init, self.pool_ext)

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(self.alpha, self.contrast_eps)

    @property
    def mil_feature_dim(self) -> int:
        return self.feature_channels * self.pool_rows * self.pool_rows


@dataclass
class PreparedScene:
    """Constant per-scene inputs: pooled MIL features and oriented steps."""

    scene_id: int
    boxes: list[Box]
    label: np.ndarray
    mil_features: Tensor
    # direction -> (init_steps (T1, N, Hf), strip_steps (w, G, Hf), strip rows)
    steps: dict[Direction, tuple[np.ndarray, np.ndarray | None, np.ndarray]]
    gt: list = field(default_factory=list)


@dataclass
class ForwardResult:
    total: Tensor
    l_cpe: Tensor
    l_w: Tensor
    l_r: list[Tensor]
    scores: mil.ScoreBundle
    labels: list[np.ndarray]
    contrast: dict[Direction, dict[str, np.ndarray]]
    fused: np.ndarray


@dataclass
class _DcpeParams:
    cell: enc.LstmParams
    head_init: enc.DcpeHead
    head_ext: enc.DcpeHead


class CpeDetector:
    """Holds all trainable parameters and runs scene forwards."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng((int(seed), 0xC0DE))
        self.mil_params = mil.init_mil(
            config.mil_feature_dim, config.mil_hidden, config.classes, config.k_refine, rng
        )
        self.dcpe: dict[Direction, _DcpeParams] = {}
        for d in config.directions:
            self.dcpe[d] = _DcpeParams(
                cell=enc.init_lstm(config.pool_rows, config.lstm_hidden, rng),
                head_init=enc.init_head(config.lstm_hidden, config.classes, rng),
                head_ext=enc.init_head(config.lstm_hidden, config.classes, rng),
            )
        if not config.cpe_enabled:
            # Frozen block-identity fusion keeps the baseline exactly
            # at the plain dual-stream detector.
            for t in self._fusion_tensors():
                t.requires_grad = False

    def _fusion_tensors(self) -> list[Tensor]:
        p = self.mil_params
        return [p.fuse_cls_w, p.fuse_cls_b, p.fuse_dec_w, p.fuse_dec_b]

    def named_params(self) -> dict[str, Tensor]:
        out = {f"mil.{k}": v for k, v in self.mil_params.tensors().items()}
        for d, dp in self.dcpe.items():
            prefix = f"dcpe.{d.value}"
            for k, v in dp.cell.tensors().items():
                out[f"{prefix}.cell.{k}"] = v
            for k, v in dp.head_init.tensors().items():
                out[f"{prefix}.head1.{k}"] = v
            for k, v in dp.head_ext.tensors().items():
                out[f"{prefix}.head2.{k}"] = v
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_params().items() if v.requires_grad}

    # ------------------------------------------------------------------
    # scene preprocessing

    def prepare_scene(self, scene) -> PreparedScene:
        """Precompute every constant pooling of one synthetic scene."""
        cfg = self.config
        fmap: FeatureMap = scene.feature
        boxes: list[Box] = list(scene.proposals)
        n = len(boxes)
        if n < 1:
            raise ValueError("scene has no proposals")
        scale = fmap.spatial_scale
        p = cfg.pool_rows

        feats = np.empty((n, cfg.feature_channels, p, p))
        for i, b in enumerate(boxes):
            for ch in range(cfg.feature_channels):
                grid = fmap.values[ch]
                feats[i, ch] = grid.ravel()[pool_indices(grid, b, p, p, scale)]
        mil_features = Tensor(feats.reshape(n, -1))

        steps: dict[Direction, tuple] = {}
        if cfg.cpe_enabled:
            mean_grid = fmap.channel_mean
            dims = ImageDims(scene.dims.width, scene.dims.height)
            for d in cfg.directions:
                init_all = np.empty((cfg.pool_init, n, cfg.pool_rows))
                strip_list, strip_rows = [], []
                for i, b in enumerate(boxes):
                    b_ext = extend_box(b, d, dims, cfg.t, cfg.use_aspect_ratio)
                    init_steps, strip_steps = oriented_step_values(
                        mean_grid, b, b_ext, d, cfg.pooling, scale
                    )
                    init_all[:, i, :] = init_steps
                    if strip_steps is not None:
                        strip_rows.append(i)
                        strip_list.append(strip_steps)
                if strip_rows:
                    strip_all = np.stack(strip_list, axis=1)  # (w, G, Hf)
                else:
                    strip_all = None
                steps[d] = (init_all, strip_all, np.asarray(strip_rows, dtype=np.int64))

        return PreparedScene(
            scene_id=scene.scene_id,
            boxes=boxes,
            label=np.asarray(scene.label, dtype=np.float64),
            mil_features=mil_features,
            steps=steps,
            gt=list(scene.gt),
        )

    # ------------------------------------------------------------------
    # forward passes

    def _direction_forward(self, dp: _DcpeParams, prep_steps, n: int, labels):
        """One D-CPE: encode, attend, score, decode; returns contrast parts."""
        cfg = self.config
        init_all, strip_all, strip_rows = prep_steps
        cell = enc.CellWeights(dp.cell)
        init_steps = [Tensor(init_all[t]) for t in range(init_all.shape[0])]
        state0 = enc.zero_state(dp.cell, batch=n)
        final, hiddens = enc.encode_batch(cell, init_steps, state0)
        h_init = tc.stack(hiddens, axis=1)  # (N, T1, M)

        d_init = enc.attention_pool_batch(dp.head_init.attn, h_init)
        s_init = enc.semantic_score(dp.head_init, d_init)
        _, l1 = enc.decoder_forward(dp.head_init, d_init, labels)

        if strip_all is None:
            # Every extension clamped away: the extended sequence is the
            # initial one, seen through the second head.
            d_ext = enc.attention_pool_batch(dp.head_ext.attn, h_init)
        else:
            g = strip_rows
            if len(g) == n:
                h_g, c_g = final.h, final.c
                h_base = h_init
            else:
                h_g, c_g = tc.take_rows(final.h, g), tc.take_rows(final.c, g)
                h_base = tc.take_rows(h_init, g)
            strip_steps = [Tensor(strip_all[t]) for t in range(strip_all.shape[0])]
            _, strip_hiddens = enc.encode_batch(cell, strip_steps, enc.LstmState(h_g, c_g))
            h_ext = tc.concat([h_base, tc.stack(strip_hiddens, axis=1)], axis=1)
            pooled_g = enc.attention_pool_batch(dp.head_ext.attn, h_ext)
            if len(g) == n:
                d_ext = pooled_g
            else:
                rest = np.setdiff1d(np.arange(n), g)
                pooled_rest = enc.attention_pool_batch(dp.head_ext.attn, tc.take_rows(h_init, rest))
                d_ext = tc.scatter_rows(n, [(g, pooled_g), (rest, pooled_rest)])
        s_ext = enc.semantic_score(dp.head_ext, d_ext)
        _, l2 = enc.decoder_forward(dp.head_ext, d_ext, labels)

        contrast = normalize_contrast(raw_contrast(s_init, s_ext), cfg.contrast_eps)
        return contrast, (l1, l2), {"s_b": s_init.data, "s_bl": s_ext.data}

    def forward(self, prep: PreparedScene, training: bool = True) -> ForwardResult:
        """Full losses and scores for one prepared scene.

        Run inside a Tape to make the result differentiable; without a
        tape this is a plain evaluation.
        """
        cfg = self.config
        n = len(prep.boxes)
        y = mil.check_image_label(prep.label, training=training)

        hidden = mil.mil_hidden(prep.mil_features, self.mil_params)
        x_cls, x_dec = mil.stream_logits(hidden, self.mil_params)

        per_dir: dict[Direction, ContrastMatrix] = {}
        debug: dict[Direction, dict[str, np.ndarray]] = {}
        pairs = []
        if cfg.cpe_enabled:
            for d in cfg.directions:
                contrast_d, pair, dbg = self._direction_forward(self.dcpe[d], prep.steps[d], n, y)
                per_dir[d] = contrast_d
                dbg["n"] = contrast_d.values.data
                debug[d] = dbg
                pairs.append(pair)
            l_cpe = cpe_loss(pairs)
        else:
            l_cpe = Tensor(0.0)

        zero = ContrastMatrix(Tensor(np.zeros((n, cfg.classes))), "off")
        fused = fuse_directions(
            per_dir.get(Direction.R2L, zero),
            per_dir.get(Direction.L2R, zero),
            per_dir.get(Direction.T2B, zero),
            per_dir.get(Direction.B2T, zero),
            cfg.fusion,
        )

        x_rcls, x_rdec = mil.fuse_semantics(x_cls, x_dec, fused, self.mil_params)
        x_s, sigma = mil.proposal_and_image_scores(x_rcls, x_rdec)
        l_w = mil.wsddn_loss(sigma, y)

        phi = mil.refine_forward(hidden, self.mil_params)
        l_r, labels_per_branch = [], []
        prev = x_s.data
        for k in range(cfg.k_refine):
            labels_k = mil.refine_labels(prev, prep.boxes, y, cfg.tau)
            labels_per_branch.append(labels_k)
            l_r.append(mil.refinement_loss(phi[k], labels_k))
            prev = phi[k].data[:, : cfg.classes]

        total = mil.total_loss(l_cpe, l_w, l_r)
        bundle = mil.ScoreBundle(x_cls, x_dec, x_rcls, x_rdec, x_s, sigma, phi)
        return ForwardResult(total, l_cpe, l_w, l_r, bundle, labels_per_branch, debug, fused.values.data)

    def detection_scores(self, prep: PreparedScene) -> np.ndarray:
        """N x C detection scores: the refinement branches' mean class score."""
        cfg = self.config
        hidden = mil.mil_hidden(prep.mil_features, self.mil_params)
        phi = mil.refine_forward(hidden, self.mil_params)
        stacked = np.stack([p.data[:, : cfg.classes] for p in phi], axis=0)
        return stacked.mean(axis=0)

    # ------------------------------------------------------------------
    # persistence

    _CONFIG_KEYS = (
        "classes", "feature_channels", "mil_hidden", "lstm_hidden", "pool_rows",
        "pool_init", "pool_ext", "t", "alpha", "contrast_eps", "k_refine", "tau",
        "use_aspect_ratio", "cpe_enabled",
    )

    def save(self, path) -> None:
        arrays = {k: v.data for k, v in self.named_params().items()}
        for key in self._CONFIG_KEYS:
            arrays[f"config.{key}"] = np.asarray(float(getattr(self.config, key)))
        arrays["config.directions"] = np.asarray(
            [1.0 if d in self.config.directions else 0.0 for d in ALL_DIRECTIONS]
        )
        tc.save_checkpoint(path, arrays)

    @classmethod
    def load(cls, path) -> "CpeDetector":
        arrays = tc.load_checkpoint(path)
        kwargs = {}
        for key in cls._CONFIG_KEYS:
            raw = float(arrays.pop(f"config.{key}"))
            default = getattr(ModelConfig, key)
            kwargs[key] = type(default)(raw) if not isinstance(default, bool) else bool(raw)
        mask = arrays.pop("config.directions")
        kwargs["directions"] = tuple(d for d, on in zip(ALL_DIRECTIONS, mask) if on)
        model = cls(ModelConfig(**kwargs))
        params = model.named_params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, tensor in params.items():
            if tensor.data.shape != arrays[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            tensor.data = arrays[name]
        return model
