"""Unified run configuration: defaults, YAML files, and key=value overrides.

Precedence is overrides > config file > defaults.  Unknown keys are
rejected with the offending field path, and every command echoes the fully
resolved configuration into its output directory.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbones import FrozenEncoderConfig, TokenEncoderConfig
from .data.preprocess import IMAGENET_MEAN, IMAGENET_STD
from .data.toy import ToyConfig
from .errors import ConfigError


@dataclass
class DataConfig:
    root: str = ""
    layout: str = "aebad"  # mvtec | aebad | manifest_file
    resize_to: int = 256
    crop_to: int = 224
    augment: bool = True
    crop_scale: tuple[float, float] = (0.8, 1.0)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


@dataclass
class MaskingConfig:
    ratio: float = 0.4
    mode: str = "token_drop"  # token_drop | in_place_fill
    unit_size: int = 16
    fill_value: float = 0.0


@dataclass
class EncoderSection:
    variant: str = "vit_b_pretrained_mae"
    width: int = 768
    depth: int = 12
    heads: int = 12
    patch_size: int = 16
    mlp_ratio: float = 4.0
    include_class_token: bool = True
    weights_path: str | None = None


@dataclass
class TeacherSection:
    family: str = "wideresnet50"
    stages: tuple[int, ...] = (1, 2, 3)
    weights: str = "pretrained"
    seed: int = 0
    toy_channels: tuple[int, int, int] = (32, 64, 128)


@dataclass
class FpnSection:
    # None derives the per-branch channel counts from the teacher stages.
    out_channels: tuple[int, ...] | None = None


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.01
    # None decays the rate by 0.1 at epochs ceil(0.8 E) and ceil(0.9 E).
    lr_schedule: tuple[tuple[int, float], ...] | None = None
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 = final only

    def resolved_schedule(self) -> tuple[tuple[int, float], ...]:
        if self.lr_schedule is not None:
            return tuple((int(e), float(m)) for e, m in self.lr_schedule)
        return (
            (math.ceil(0.8 * self.epochs), 0.1),
            (math.ceil(0.9 * self.epochs), 0.1),
        )


@dataclass
class EvalSection:
    fpr_limit: float = 0.3
    heatmap_scale: str = "fixed"  # fixed [0, 2s] | relative per image


@dataclass
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    data: DataConfig = field(default_factory=DataConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    fpn: FpnSection = field(default_factory=FpnSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    toy: ToyConfig = field(default_factory=ToyConfig)

    _SECTIONS = {
        "data": DataConfig,
        "masking": MaskingConfig,
        "encoder": EncoderSection,
        "teacher": TeacherSection,
        "fpn": FpnSection,
        "train": TrainConfig,
        "eval": EvalSection,
        "toy": ToyConfig,
    }

    # -- construction ---------------------------------------------------

    @classmethod
    def from_dict(cls, mapping: dict) -> "RunConfig":
        mapping = dict(mapping or {})
        kwargs: dict = {}
        for name, section_cls in cls._SECTIONS.items():
            if name in mapping:
                kwargs[name] = _build_section(section_cls, mapping.pop(name), name)
        for name in ("seed", "device"):
            if name in mapping:
                kwargs[name] = mapping.pop(name)
        if mapping:
            raise ConfigError(f"unknown config key: {sorted(mapping)[0]}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return _tuples_to_lists(out)

    def validate(self) -> None:
        d, m, t = self.data, self.masking, self.train
        if d.layout not in ("mvtec", "aebad", "manifest_file"):
            raise ConfigError(f"data.layout: unknown layout {d.layout!r}")
        if d.crop_to % 16 != 0:
            raise ConfigError(f"data.crop_to: must be divisible by 16, got {d.crop_to}")
        if d.resize_to < d.crop_to:
            raise ConfigError("data.resize_to: must be >= data.crop_to")
        if not 0.0 <= m.ratio < 1.0:
            raise ConfigError(f"masking.ratio: must lie in [0, 1), got {m.ratio}")
        if m.mode not in ("token_drop", "in_place_fill"):
            raise ConfigError(f"masking.mode: unknown mode {m.mode!r}")
        if m.unit_size < 1 or d.crop_to % m.unit_size != 0:
            raise ConfigError(
                f"masking.unit_size: {m.unit_size} does not divide crop size {d.crop_to}"
            )
        if t.epochs < 1:
            raise ConfigError("train.epochs: must be >= 1")
        if t.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if d.crop_to % self.encoder.patch_size != 0:
            raise ConfigError(
                f"encoder.patch_size: {self.encoder.patch_size} does not divide "
                f"crop size {d.crop_to}"
            )
        # Constructing the typed sub-configs runs their own invariants.
        self.token_encoder_config()
        self.frozen_encoder_config()

    # -- derived typed configs -------------------------------------------

    def token_encoder_config(self) -> TokenEncoderConfig:
        e = self.encoder
        return TokenEncoderConfig(
            width=e.width,
            depth=e.depth,
            heads=e.heads,
            patch_size=e.patch_size,
            grid_side=self.data.crop_to // e.patch_size,
            mlp_ratio=e.mlp_ratio,
            include_class_token=e.include_class_token,
            variant=e.variant,
        )

    def frozen_encoder_config(self) -> FrozenEncoderConfig:
        t = self.teacher
        return FrozenEncoderConfig(
            family=t.family,
            stages=tuple(t.stages),
            weights=t.weights,
            seed=t.seed,
            toy_channels=tuple(t.toy_channels),
        )


def _build_section(cls, mapping, path: str):
    if isinstance(mapping, cls):
        return mapping
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(mapping).__name__}")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in names:
            raise ConfigError(f"unknown config key: {path}.{key}")
        kwargs[key] = _match_default(value, getattr(defaults, key))
    try:
        return dataclasses.replace(defaults, **kwargs)
    except (TypeError, ValueError, ConfigError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _match_default(value, default):
    """Coerce YAML lists back into the tuple shapes the dataclasses use."""
    if isinstance(value, list):
        return _deep_tuple(value)
    return value


def _deep_tuple(x):
    if isinstance(x, list):
        return tuple(_deep_tuple(i) for i in x)
    return x


def _tuples_to_lists(x):
    if isinstance(x, dict):
        return {k: _tuples_to_lists(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_tuples_to_lists(i) for i in x]
    if isinstance(x, Path):
        return str(x)
    return x


def apply_overrides(mapping: dict, overrides: list[str]) -> dict:
    """Apply dotted ``section.key=value`` assignments onto a config mapping."""
    out = dict(mapping or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty key component")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: unparseable value ({exc})") from exc
        node = out
        for k in keys[:-1]:
            nxt = node.get(k)
            if not isinstance(nxt, dict):
                nxt = {}
                node[k] = nxt
            node = nxt
        node[keys[-1]] = value
    return out


def load_run_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Load a YAML config file (optional) and apply overrides on top."""
    mapping: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping at top level")
        mapping = loaded
    mapping = apply_overrides(mapping, overrides or [])
    return RunConfig.from_dict(mapping)


def save_resolved_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path
