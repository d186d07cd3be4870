"""Model, training, and run configuration with JSON round-tripping."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration content."""


@dataclass
class ModelConfig:
    """Dimensional hyperparameters of the dual-stream model.

    Presets: "toy" (default, trainable on a desk) and "paper" (full-size
    dims for shape parity checks only; never trained here).
    """

    preset: str = "toy"
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    cnn_channels: int = 96
    cnn_grid: int = 4
    align_mid: int = 6           # intermediate side of the upsampler, between cnn_grid and grid
    adapter_ratio: float = 0.5
    adapter_scale_init: float = 0.1
    dfm_mode: str = "paper-text"  # or "verbatim-eq5"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if not (self.cnn_grid <= self.align_mid <= self.grid):
            raise ConfigError(
                f"align_mid {self.align_mid} must lie between cnn_grid {self.cnn_grid} "
                f"and grid {self.grid}"
            )
        if self.dfm_mode not in ("paper-text", "verbatim-eq5"):
            raise ConfigError(f"unknown dfm_mode {self.dfm_mode!r}")
        stage_out = self.image_size // 8  # three stride-2 stages
        if stage_out % self.cnn_grid != 0:
            raise ConfigError(
                f"image_size/8 = {stage_out} not divisible by cnn_grid {self.cnn_grid}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def adapter_dim(self) -> int:
        import math

        return math.ceil(self.adapter_ratio * self.embed_dim)

    @property
    def gate_dim(self) -> int:
        import math

        return math.ceil(self.embed_dim / 4)

    @property
    def pool_factor(self) -> int:
        return (self.image_size // 8) // self.cnn_grid

    @property
    def num_regions(self) -> int:
        return 4

    @classmethod
    def toy(cls, **overrides: Any) -> "ModelConfig":
        return cls(**{**_TOY, **overrides})

    @classmethod
    def paper(cls, **overrides: Any) -> "ModelConfig":
        return cls(**{**_PAPER, **overrides})

    @classmethod
    def from_preset(cls, preset: str, **overrides: Any) -> "ModelConfig":
        if preset == "toy":
            return cls.toy(**overrides)
        if preset == "paper":
            return cls.paper(**overrides)
        raise ConfigError(f"unknown preset {preset!r}")


_TOY = dict(
    preset="toy",
    image_size=64,
    patch_size=8,
    embed_dim=64,
    num_heads=4,
    depth=4,
    cnn_channels=96,
    cnn_grid=4,
    align_mid=6,
    adapter_ratio=0.5,
    adapter_scale_init=0.1,
)

# Full-size dims: 224px images on a 16x16 grid of 768-d tokens, a 7x7x1024
# local stream, and a 14-wide intermediate resampling step.
_PAPER = dict(
    preset="paper",
    image_size=224,
    patch_size=14,
    embed_dim=768,
    num_heads=12,
    depth=12,
    cnn_channels=1024,
    cnn_grid=7,
    align_mid=14,
    adapter_ratio=0.5,
    adapter_scale_init=0.1,
)


@dataclass
class TrainConfig:
    """Optimizer and mining settings for the metric-learning loop."""

    learning_rate: float = 1e-3   # paper-scale preset uses 1e-5; toy backbones are random
    batch_size: int = 8           # paper-scale preset uses 16
    epochs: int = 5
    margin: float = 0.1
    k_negatives: int = 4
    seed: int = 0
    freeze_backbone: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.k_negatives < 1:
            raise ConfigError("batch_size, epochs, k_negatives out of range")


@dataclass
class AblationFlags:
    """Variant switches mirroring the ablation table."""

    disable_fsa: bool = False
    disable_cnn_stream: bool = False
    disable_dfm: bool = False
    static_fusion: bool = False

    @property
    def fusion(self) -> str:
        """Effective fusion mode: 'vit-only', 'concat', or 'dfm'."""
        if self.disable_cnn_stream:
            return "vit-only"
        if self.disable_dfm or self.static_fusion:
            return "concat"
        return "dfm"


@dataclass
class RunConfig:
    """Everything a CLI run needs: model dims, train settings, ablations."""

    model: ModelConfig = field(default_factory=ModelConfig.toy)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    threads: int = 1


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, data: dict, section: str):
    unknown = set(data) - _fields(cls)
    if unknown:
        raise ConfigError(f"unknown {section} config key(s): {sorted(unknown)}")
    return cls(**data)


def run_config_from_dict(data: dict) -> RunConfig:
    """Parse a config dict, rejecting unknown keys at every level."""
    unknown = set(data) - {"model", "train", "ablation", "threads"}
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    model_data = dict(data.get("model", {}))
    preset = model_data.pop("preset", "toy")
    unknown = set(model_data) - (_fields(ModelConfig) - {"preset"})
    if unknown:
        raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
    model = ModelConfig.from_preset(preset, **model_data)
    train = _build(TrainConfig, dict(data.get("train", {})), "train")
    ablation = _build(AblationFlags, dict(data.get("ablation", {})), "ablation")
    threads = int(data.get("threads", 1))
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    return RunConfig(model=model, train=train, ablation=ablation, threads=threads)


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {
        "model": dataclasses.asdict(cfg.model),
        "train": dataclasses.asdict(cfg.train),
        "ablation": dataclasses.asdict(cfg.ablation),
        "threads": cfg.threads,
    }


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        return run_config_from_dict(json.load(fh))


def dump_run_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run_config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


ENV_PREFIX = "LGCN_"

_ENV_SCALARS = {
    "SEED": ("train", "seed", int),
    "EPOCHS": ("train", "epochs", int),
    "BATCH_SIZE": ("train", "batch_size", int),
    "LEARNING_RATE": ("train", "learning_rate", float),
    "THREADS": (None, "threads", int),
    "DFM_MODE": ("model", "dfm_mode", str),
}


def apply_env_overrides(cfg: RunConfig, environ: dict | None = None) -> RunConfig:
    """Apply LGCN_-prefixed environment overrides onto a parsed config."""
    env = os.environ if environ is None else environ
    data = run_config_to_dict(cfg)
    for key, (section, name, conv) in _ENV_SCALARS.items():
        raw = env.get(ENV_PREFIX + key)
        if raw is None:
            continue
        try:
            value = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {ENV_PREFIX + key}: {raw!r}") from exc
        if section is None:
            data[name] = value
        else:
            data[section][name] = value
    return run_config_from_dict(data)
