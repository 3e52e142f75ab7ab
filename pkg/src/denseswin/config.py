"""Model and run configuration: dataclasses, presets and strict JSON loading.

Every field has a default. Unknown keys are rejected with the dotted path of
the offending key, e.g. ``train.epochz``.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dense import DenseBranchConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .swin import SwinConfig

PRESETS = ("desk", "full")


@dataclass
class Ablation:
    disable_mab: bool = False
    disable_dense_branch: bool = False
    disable_squeeze: bool = False


@dataclass
class ModelConfig:
    preset: str = "desk"
    image_size: int = 64
    dense: DenseBranchConfig = field(default_factory=DenseBranchConfig)
    swin: SwinConfig = field(default_factory=SwinConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ablation: Ablation = field(default_factory=Ablation)

    def validate(self) -> None:
        if self.image_size < 1:
            raise ConfigError("model.image_size must be positive")
        self.swin.validate(self.image_size)
        if not self.ablation.disable_dense_branch:
            self.dense.validate(self.image_size)
        self.fusion.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def desk_model() -> ModelConfig:
    """64x64 inputs, C=16, window 4, two small dense blocks (L=4, k=8)."""
    return ModelConfig(preset="desk")


def full_model() -> ModelConfig:
    """224x224 inputs, C=96, window 7, dense blocks {6, 12, 24, 16} with k=32."""
    return ModelConfig(
        preset="full",
        image_size=224,
        dense=DenseBranchConfig(
            stem_channels=64,
            stem_kernel=7,
            stem_stride=2,
            stem_pool=True,
            growth_rate=32,
            block_layers=[6, 12, 24, 16],
            compression=0.5,
            bottleneck=True,
        ),
        swin=SwinConfig(embed_dim=96, window=7),
        fusion=FusionConfig(grid=7, fused_channels=512),
    )


def preset(name: str) -> ModelConfig:
    if name == "desk":
        return desk_model()
    if name == "full":
        return full_model()
    raise ConfigError(f"model.preset: unknown preset {name!r} (expected one of {PRESETS})")


@dataclass
class AugmentationSpec:
    enabled: bool = False
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    scale_range: list[float] = field(default_factory=lambda: [0.8, 1.2])
    shear_degrees: float = 10.0

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(enabled=False)


@dataclass
class DataConfig:
    manifest: str | None = None
    synthetic_per_class: int = 10
    input_size: int | None = None
    test_fraction: float = 0.2
    seed: int = 0
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    oversample: bool = False
    balance_factor: float = 1.0


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    base_lr: float = 1e-3
    decay_factor: float = 0.15
    decay_period: int = 20
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 10
    out_dir: str = "runs/desk"
    eval_test: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=desk_model)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def seed(self) -> int:
        return self.data.seed

    def validate(self) -> None:
        if self.data.input_size is not None and self.data.input_size != self.model.image_size:
            raise ConfigError(
                f"data.input_size {self.data.input_size} != model.image_size {self.model.image_size}"
            )
        self.model.validate()
        if not 0 <= self.data.test_fraction < 1:
            raise ConfigError("data.test_fraction must be in [0, 1)")
        if self.train.batch_size < 1 or self.train.epochs < 0:
            raise ConfigError("train.batch_size must be >= 1 and train.epochs >= 0")
        if not 0 < self.train.decay_factor <= 1:
            raise ConfigError("train.decay_factor must be in (0, 1]")
        if self.train.base_lr <= 0 or self.train.decay_period < 1:
            raise ConfigError("train.base_lr must be > 0 and train.decay_period >= 1")
        lo, hi = self.data.augmentation.scale_range
        if not 0 < lo <= hi:
            raise ConfigError("data.augmentation.scale_range must satisfy 0 < min <= max")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# strict dict -> dataclass conversion
# ---------------------------------------------------------------------------


def _merge(dc, values: dict, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(values).__name__}")
    fields = {f.name: f for f in dataclasses.fields(dc)}
    for key, value in values.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key {where!r}")
        current = getattr(dc, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, where)
        else:
            setattr(dc, key, _coerce(current, value, where))
    return dc


def _coerce(current, value, where):
    if value is None:
        return None
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def run_config_from_dict(raw: dict[str, Any] | None = None, seed: int | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig`.

    Seed precedence: ``seed`` argument, then ``data.seed`` in ``raw``, then
    the ``HDSW_SEED`` environment variable, then 0.
    """
    raw = copy.deepcopy(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    for key in raw:
        if key not in ("model", "data", "train"):
            raise ConfigError(f"unknown config key {key!r}")
    model_raw = raw.get("model", {})
    if not isinstance(model_raw, dict):
        raise ConfigError("model: expected an object")
    cfg = RunConfig(model=preset(model_raw.get("preset", "desk")))
    _merge(cfg.model, model_raw, "model")
    _merge(cfg.data, raw.get("data", {}), "data")
    _merge(cfg.train, raw.get("train", {}), "train")
    if seed is not None:
        cfg.data.seed = int(seed)
    elif "seed" not in raw.get("data", {}):
        env = os.environ.get("HDSW_SEED")
        if env is not None:
            try:
                cfg.data.seed = int(env)
            except ValueError as e:
                raise ConfigError(f"HDSW_SEED must be an integer, got {env!r}") from e
    if cfg.data.input_size is None:
        cfg.data.input_size = cfg.model.image_size
    cfg.validate()
    return cfg


def load_run_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    if path is None:
        return run_config_from_dict({}, seed)
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e})") from e
    return run_config_from_dict(raw, seed)


def model_config_from_dict(raw: dict) -> ModelConfig:
    cfg = preset(raw.get("preset", "desk"))
    _merge(cfg, raw, "model")
    cfg.validate()
    return cfg
