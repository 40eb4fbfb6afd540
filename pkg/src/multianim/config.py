"""Run configuration: a TOML document with [data], [model], [unbind],
[diffusion] and [train] sections. Every key is optional; missing keys keep the
defaults below."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .errors import DataIOError, FormatError, InvalidArgumentError


@dataclass
class DataConfig:
    root: str = "data"
    height: int = 64
    width: int = 64
    frames: int = 16
    train_episodes: int = 500
    test_episodes: int = 20
    train_seed: int = 0
    test_seed: int = 1_000_000
    max_subjects: int = 6
    misalign_min: float = 0.15
    misalign_max: float = 0.3
    misalign_scale_lo: float = 0.8
    misalign_scale_hi: float = 1.25


@dataclass
class ModelConfig:
    width: int = 192
    depth: int = 6
    heads: int = 6
    patch_t: int = 1
    patch_h: int = 2
    patch_w: int = 2
    mlp_ratio: float = 4.0
    text_width: int = 64
    text_heads: int = 4
    text_len: int = 8
    codec_factor: int = 4
    pose_hidden: tuple[int, int] = (16, 32)
    pose_channels: int = 0  # 0 means "same as width"
    mask_hidden: int = 16
    lora_rank: int = 8
    lora_alpha: float = 16.0


@dataclass
class UnbindConfig:
    enabled: bool = True
    translate_range: float = 0.25
    scale_lo: float = 0.5
    scale_hi: float = 1.5
    feature_shift_range: float = 0.25
    duplicate_min: int = 0
    duplicate_max: int = 2
    clamp_to_canvas: bool = True
    region_tau: float = 0.05
    max_attempts: int = 32

    def __post_init__(self):
        if not self.translate_range >= 0:
            raise InvalidArgumentError("translate_range must be >= 0")
        if not 0 < self.scale_lo <= self.scale_hi:
            raise InvalidArgumentError("need 0 < scale_lo <= scale_hi")
        if not 0 <= self.duplicate_min <= self.duplicate_max:
            raise InvalidArgumentError("need 0 <= duplicate_min <= duplicate_max")
        if not 0 <= self.feature_shift_range <= 1:
            raise InvalidArgumentError("feature_shift_range is a grid fraction in [0, 1]")


@dataclass
class DiffusionConfig:
    train_steps: int = 1000
    sample_steps: int = 50
    guidance: float = 2.0
    drop_text: float = 0.1
    drop_pose: float = 0.1
    drop_mask: float = 0.1
    clip_x0: bool = True  # clamp x0 estimates to the latent range of valid pixels


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    pretrain_steps: int = 3000
    finetune_steps: int = 2000
    lr_pretrain: float = 1e-3
    lr_finetune: float = 3e-4
    weight_decay: float = 0.01
    warmup_steps: int = 100
    grad_clip: float = 1.0
    p_ani: float = 0.7
    use_mask: bool = True
    use_text: bool = True
    log_every: int = 50
    eval_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_ani <= 1.0:
            raise InvalidArgumentError(f"p_ani must lie in [0, 1], got {self.p_ani}")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    unbind: UnbindConfig = field(default_factory=UnbindConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {
            f.name: _plain(dataclasses.asdict(getattr(self, f.name)))
            for f in dataclasses.fields(self)
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "Config":
        sections = {f.name: f.default_factory for f in dataclasses.fields(cls)}
        unknown = set(doc) - set(sections)
        if unknown:
            raise FormatError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, factory in sections.items():
            values = dict(doc.get(name, {}))
            known = {f.name: f for f in dataclasses.fields(factory())}
            bad = set(values) - set(known)
            if bad:
                raise FormatError(f"unknown keys in [{name}]: {sorted(bad)}")
            for key, value in values.items():
                if isinstance(value, list):
                    values[key] = tuple(value)
            built[name] = factory(**values)
        return cls(**built)

    def replace(self, **sections: dict[str, Any]) -> "Config":
        """Copy with some keys overridden, e.g. ``cfg.replace(train={"seed": 3})``."""
        doc = self.to_dict()
        for name, values in sections.items():
            doc.setdefault(name, {}).update(values)
        return Config.from_dict(doc)


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise DataIOError(f"missing config file: {path}") from exc
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise FormatError(f"cannot parse config {path}: {exc}") from exc
    return Config.from_dict(doc)


def dump_config(cfg: Config) -> str:
    """Serialize to TOML text (flat sections of scalars and arrays)."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")
