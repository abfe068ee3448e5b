"""Run configuration: one flat dataclass, persisted as YAML beside every artifact."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

SCALES = ("head", "face", "lip")


@dataclass
class RunConfig:
    seed: int = 0

    # windowing / composite layout
    window_size: int = 5
    frame_side: int = 224
    band_height: int = 224
    expand_factor: int = 1

    # spectrogram front-end
    sample_rate: int = 16000
    n_mels: int = 64
    fft_window_s: float = 0.025
    hop_s: float = 0.010
    log_floor: float = 1e-10
    denoise: bool = False

    # crop pyramid
    crop_ratios: tuple = (1.0, 0.65, 0.45)
    anchor_mode: str = "fixed"
    lip_bottom: float = 0.92

    # network
    backbone: str = "clip-vit-l14"
    global_input_side: int = 224
    vit_width: int = 32
    vit_depth: int = 2
    vit_heads: int = 4
    vit_patch: int = 8
    vit_patch_height: int | None = None  # None: square patches
    vit_stem: str = "linear"
    freeze_backbone: bool = True
    region_input_side: int = 112
    region_channels: int = 64
    region_dim: int = 256
    classifier_hidden: int = 256

    # objective
    k: float = 1.0
    lambda_ra: float = 1.0
    prob_eps: float = 1e-7

    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # max global gradient norm, 0 disables
    batch_size: int = 32
    epochs: int = 10
    val_every: int = 1

    # evaluation
    threshold: float = 0.5

    # paths (filled in by the CLI when relevant)
    manifest: str | None = None
    cache_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        self.crop_ratios = tuple(float(r) for r in self.crop_ratios)
        self.validate()

    def validate(self):
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.frame_side < 1 or self.band_height < 1:
            raise ConfigError("frame_side and band_height must be positive")
        if self.expand_factor < 1:
            raise ConfigError(f"expand_factor must be >= 1, got {self.expand_factor}")
        if len(self.crop_ratios) != 3:
            raise ConfigError("crop_ratios must be a triple (head, face, lip)")
        if self.anchor_mode not in ("fixed", "landmarks"):
            raise ConfigError(f"unknown anchor_mode {self.anchor_mode!r}")
        if self.k <= 0:
            raise ConfigError("k must be positive")
        if self.optimizer not in ("adam", "adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    @property
    def composite_shape(self) -> tuple[int, int]:
        return self.band_height + self.frame_side, self.window_size * self.frame_side

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["crop_ratios"] = list(self.crop_ratios)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Read a YAML key-value file (or defaults), then apply non-None overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping of key: value")
        preset = raw.pop("preset", None)
        if preset is not None:
            data.update(PRESETS[preset])
        data.update(raw)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


TINY = dict(
    frame_side=64,
    band_height=64,
    backbone="tiny",
    global_input_side=64,
    vit_width=32,
    vit_depth=2,
    vit_heads=4,
    vit_patch=4,
    vit_patch_height=64,
    freeze_backbone=False,
    region_input_side=32,
    region_channels=16,
    region_dim=32,
    classifier_hidden=32,
    lambda_ra=0.01,
    lr=1e-3,
    grad_clip=1.0,
    batch_size=16,
    epochs=20,
)

PRESETS = {"default": {}, "tiny": TINY}


def tiny_config(**overrides) -> RunConfig:
    return RunConfig(**{**TINY, **overrides})
