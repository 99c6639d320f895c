"""Run configuration and its flat ``key = value`` text format.

A TrainConfig describes one full run: optimizer schedule, model sizes,
contrast hyper-parameters, and the synthetic dataset. Unknown keys in a
config file are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from cpe.detector import ALL_DIRECTIONS, ModelConfig
from cpe.geometry import Direction
from cpe.harness.scenes import SceneSpec

__all__ = ["TrainConfig", "load_config", "loads_config", "save_config", "dumps_config"]


@dataclass(frozen=True)
class TrainConfig:
    # optimizer and schedule
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.9
    iterations: int = 500
    lr_drop_at: int = 300
    seed: int = 0

    # contrast mechanism
    t: float = 4.0
    alpha: float = 0.5
    k_refine: int = 3
    tau: float = 0.1
    nms_iou: float = 0.3
    directions: str = "r2l,l2r,t2b,b2t"
    use_aspect_ratio: bool = True
    cpe_enabled: bool = True
    contrast_eps: float = 1e-12

    # model sizes
    pool_rows: int = 7
    pool_init: int = 7
    pool_ext: int = 3
    lstm_hidden: int = 16
    mil_hidden: int = 48

    # synthetic dataset
    classes: int = 4
    scenes: int = 20
    objects_min: int = 1
    objects_max: int = 2
    distractors: int = 4
    image_size: int = 64
    feature_size: int = 32
    feature_channels: int = 6
    jitter_proposals: int = 3
    part_proposals: int = 2
    noise: float = 0.05

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        self.direction_list()  # validate

    def direction_list(self) -> tuple[Direction, ...]:
        raw = [part.strip().lower() for part in self.directions.split(",") if part.strip()]
        by_value = {d.value: d for d in ALL_DIRECTIONS}
        out = []
        for name in raw:
            if name not in by_value:
                raise ValueError(f"unknown direction {name!r}; valid: {sorted(by_value)}")
            if by_value[name] not in out:
                out.append(by_value[name])
        return tuple(out)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            classes=self.classes,
            feature_channels=self.feature_channels,
            mil_hidden=self.mil_hidden,
            lstm_hidden=self.lstm_hidden,
            pool_rows=self.pool_rows,
            pool_init=self.pool_init,
            pool_ext=self.pool_ext,
            t=self.t,
            alpha=self.alpha,
            contrast_eps=self.contrast_eps,
            k_refine=self.k_refine,
            tau=self.tau,
            directions=self.direction_list(),
            use_aspect_ratio=self.use_aspect_ratio,
            cpe_enabled=self.cpe_enabled,
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            classes=self.classes,
            objects_min=self.objects_min,
            objects_max=self.objects_max,
            distractors=self.distractors,
            image_size=self.image_size,
            feature_size=self.feature_size,
            channels=self.feature_channels,
            jitter_proposals=self.jitter_proposals,
            part_proposals=self.part_proposals,
            noise=self.noise,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(key: str, raw: str):
    f = _FIELDS[key]
    raw = raw.strip()
    if f.type in ("bool", bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"bad boolean for {key}: {raw!r}")
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    return raw


def loads_config(text: str, overrides: dict | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; '#' starts a comment; unknown keys error."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    if overrides:
        for key, raw in overrides.items():
            if key not in _FIELDS:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, str(raw))
    return TrainConfig(**values)


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    with open(path) as fh:
        return loads_config(fh.read(), overrides)


def dumps_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_config(cfg))
