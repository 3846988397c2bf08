"""Model / training configuration dataclasses and their JSON form.

Every default that the method description leaves open (optimizer, widths,
state size, augmentation probabilities, ...) is a choice made here, not a
published value.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dsp import StftConfig
from .errors import ConfigError

VARIANTS = ("time_s4_unet", "tf_s4_unet", "s4nd_unet")
SCENARIOS = ("mag_regression", "mag_masking", "complex_masking")


@dataclass
class ModelConfig:
    variant: str = "s4nd_unet"
    scenario: str = "complex_masking"
    in_channels: int = 2
    num_unet_levels: int = 2
    blocks_per_level: int = 4
    base_channels: int = 80
    state_size: int = 8
    whitening: bool = False
    stft: StftConfig = field(default_factory=StftConfig)
    rank: int = 1
    pool_factor: int = 4
    expand: int = 2
    amplitude_transform: bool = True
    alpha: float = 0.5
    beta: float = 0.15
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    dplr_threshold: int = 1024
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.stft, dict):
            self.stft = StftConfig(**self.stft)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.in_channels not in (1, 2):
            raise ConfigError("in_channels must be 1 (magnitude) or 2 (real/imag)")
        if self.variant == "time_s4_unet" and self.in_channels != 1:
            raise ConfigError("the time-domain model takes a single waveform channel")
        if self.whitening and (self.variant == "time_s4_unet" or self.in_channels != 1):
            raise ConfigError("whitening applies to magnitude-spectrogram input (in_channels=1)")
        for name in ("num_unet_levels", "blocks_per_level", "base_channels", "state_size",
                     "rank", "pool_factor", "expand"):
            if getattr(self, name) < (0 if name == "num_unet_levels" else 1):
                raise ConfigError(f"{name} must be positive")
        if not 1 <= self.rank <= 4:
            raise ConfigError("rank must be between 1 and 4")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not (0 < self.alpha <= 1 and self.beta > 0):
            raise ConfigError("amplitude transform needs 0 < alpha <= 1 and beta > 0")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def n_freq(self) -> int:
        return self.stft.n_bins

    @property
    def is_spectral(self) -> bool:
        return self.variant != "time_s4_unet"

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["stft"] = self.stft.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def time_default() -> ModelConfig:
    """Time-domain U-Net, 7,103,297 parameters (64 base channels, 3 levels of 4x pooling)."""
    return ModelConfig(variant="time_s4_unet", scenario="mag_regression", in_channels=1,
                       num_unet_levels=3, blocks_per_level=4, base_channels=64, state_size=88,
                       pool_factor=4, expand=2, amplitude_transform=False)


def tf_default() -> ModelConfig:
    """Reduced-width TF-domain S4 U-Net (no parameter parity intended)."""
    return ModelConfig(variant="tf_s4_unet", scenario="mag_masking", in_channels=1,
                       num_unet_levels=2, blocks_per_level=2, base_channels=256,
                       state_size=32, pool_factor=2, whitening=True)


def s4nd_default() -> ModelConfig:
    """The small S4ND U-Net: 2 down / 2 up layers, 4 blocks each, 704,722 parameters."""
    return ModelConfig()


def tiny(variant: str, scenario: str = "complex_masking") -> ModelConfig:
    """Few-hundred-parameter configs used for gradient checks."""
    common = dict(blocks_per_level=1, state_size=2, dtype="float64",
                  stft=StftConfig(30, 24, 6))
    if variant == "time_s4_unet":
        return ModelConfig(variant=variant, scenario="mag_regression", in_channels=1,
                           num_unet_levels=1, base_channels=4, pool_factor=2,
                           amplitude_transform=False, **common)
    if variant == "tf_s4_unet":
        return ModelConfig(variant=variant, scenario=scenario,
                           in_channels=2 if scenario == "complex_masking" else 1,
                           num_unet_levels=1, base_channels=6, pool_factor=2, **common)
    return ModelConfig(variant=variant, scenario=scenario,
                       in_channels=2 if scenario == "complex_masking" else 1,
                       num_unet_levels=1, base_channels=3, **common)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 5.0
    segment_length: int = 32000
    remix: bool = True
    remix_prob: float = 1.0
    bandmask_prob: float = 0.5
    bandmask_width: float = 0.2
    bandmask_guard: int = 2
    micro_batch: int = 0
    sample_rate: int = 16000
    seed: int = 0
    rng: str = "philox"
    val_manifest: str | None = None
    whitening_eps: float = 1e-5

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.rng != "philox":
            raise ConfigError("only the 'philox' generator is supported")
        if cfg.epochs < 1 or cfg.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read ``{"model": {...}, "train": {...}}`` JSON."""
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict) or not set(raw) <= {"model", "train"}:
        raise ConfigError("config must be an object with 'model' and optional 'train' sections")
    return ModelConfig.from_dict(raw.get("model", {})), TrainConfig.from_dict(raw.get("train", {}))


def dump_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    d = {"model": model.to_dict()}
    if train is not None:
        d["train"] = train.to_dict()
    return json.dumps(d, indent=2, sort_keys=True)
