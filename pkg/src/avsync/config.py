"""Experiment configuration: dataclasses, TOML loading and resolved dumps."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib
import tomli_w

from .errors import ConfigError

VARIANTS = ("enc", "enc-mp", "dec")


@dataclass
class DataConfig:
    n_evident: int = 12
    n_ambient: int = 3
    n_train: int = 2000
    n_test: int = 300
    fps: float = 5.0
    sample_rate: int = 16000
    frame_size: int = 32
    span_frames: int = 45
    max_test_offset: int = 15
    visual_noise: float = 0.05
    audio_noise: float = 0.05


@dataclass
class ModelConfig:
    channels: int = 32
    visual_widths: list[int] = field(default_factory=lambda: [8, 16, 32])
    temporal_kernel: int = 3
    audio_hidden: int = 32
    audio_steps_per_frame: int = 4
    stft_window: int = 320
    stft_hop: int = 40
    layers: int = 3
    heads: int = 4
    ffn_dim: int = 64
    max_frames: int = 15
    temporal_init: str = "sinusoidal"
    frame_size: int = 32
    fps: float = 5.0
    sample_rate: int = 16000

    @property
    def downsample(self) -> int:
        return 2 ** len(self.visual_widths)

    @property
    def grid_size(self) -> int:
        return self.frame_size // self.downsample

    @property
    def samples_per_frame(self) -> int:
        spf = self.sample_rate / self.fps
        if abs(spf - round(spf)) > 1e-9:
            raise ConfigError(f"sample_rate/fps = {spf} is not an integer")
        return int(round(spf))

    @property
    def freq_bins(self) -> int:
        return self.stft_window // 2 + 1

    @property
    def audio_time_stride(self) -> int:
        """Spectrogram frames folded into one audio feature step."""
        hops = self.samples_per_frame / self.stft_hop
        stride = hops / self.audio_steps_per_frame
        if abs(stride - round(stride)) > 1e-9 or stride < 1:
            raise ConfigError(
                f"samples/frame ({self.samples_per_frame}) / hop ({self.stft_hop}) / "
                f"audio steps per frame ({self.audio_steps_per_frame}) must be a positive integer")
        return int(round(stride))

    @property
    def max_audio_steps(self) -> int:
        return self.max_frames * self.audio_steps_per_frame

    def validate(self) -> None:
        if self.channels % self.heads:
            raise ConfigError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.frame_size % self.downsample:
            raise ConfigError(f"frame_size {self.frame_size} not divisible by {self.downsample}")
        if self.stft_window < self.stft_hop or (self.stft_window - self.stft_hop) % 2:
            raise ConfigError("stft_window - stft_hop must be a non-negative even number")
        if self.layers < 1 or self.max_frames < 1:
            raise ConfigError("layers and max_frames must be >= 1")
        _ = self.audio_time_stride
        if self.temporal_init not in ("normal", "sinusoidal"):
            raise ConfigError(f"temporal_init must be 'normal' or 'sinusoidal', got {self.temporal_init!r}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_schedule: str = "cosine"  # "constant" or "cosine" (decays to 0 over all steps)
    epochs: int = 10
    stage1_fraction: float = 0.5
    steps_per_epoch: int | None = None
    batch_size: dict[str, int] = field(default_factory=lambda: {"enc": 4, "enc-mp": 16, "dec": 12})
    min_frames: int = 5
    max_frames: int = 15
    length_bias: float = 0.0  # P(T) proportional to T ** -length_bias over [min_frames, max_frames]
    max_offset: int = 15
    stage2_evident_only: bool = False  # stage 2 skips ambient clips, which have no offset signal
    fixed_length_variants: list[str] = field(default_factory=lambda: ["enc"])
    grad_clip: float = 5.0
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8


@dataclass
class EvalConfig:
    grid_max: int = 15
    tolerance: int = 1
    lengths: list[int] = field(default_factory=lambda: [5, 7, 9, 11, 13, 15])


@dataclass
class ExperimentConfig:
    seed: int = 0
    variant: str = "enc-mp"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        # media geometry is owned by the data section
        self.model.frame_size = self.data.frame_size
        self.model.fps = self.data.fps
        self.model.sample_rate = self.data.sample_rate
        self.model.validate()
        if max(self.eval.lengths) > self.model.max_frames or self.train.max_frames > self.model.max_frames:
            raise ConfigError("clip lengths exceed model.max_frames (encoding table capacity)")
        if self.train.min_frames < 1 or self.train.min_frames > self.train.max_frames:
            raise ConfigError("train.min_frames must be in [1, train.max_frames]")
        need = max(max(self.eval.lengths) + 2 * self.eval.grid_max,
                   self.train.max_frames + 2 * self.train.max_offset)
        if self.data.span_frames < need:
            raise ConfigError(f"data.span_frames={self.data.span_frames} too short; need >= {need}")
        if self.train.length_bias < 0:
            raise ConfigError("train.length_bias must be >= 0")
        if self.train.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"train.lr_schedule must be 'constant' or 'cosine', got {self.train.lr_schedule!r}")
        if not 0.0 <= self.train.stage1_fraction <= 1.0:
            raise ConfigError("train.stage1_fraction must be in [0, 1]")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, values: dict[str, Any], where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key}")
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except TypeError as exc:  # pragma: no cover - defensive
        raise ConfigError(str(exc)) from exc


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    raw = dict(raw)
    sections = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}
    built = {}
    for name, cls in sections.items():
        sec = raw.pop(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        built[name] = _build(cls, sec, f"{name}.")
    top = _build(ExperimentConfig, raw, "")
    for name, obj in built.items():
        setattr(top, name, obj)
    return top.validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(raw)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    def strip_none(obj):
        if isinstance(obj, dict):
            return {k: strip_none(v) for k, v in obj.items() if v is not None}
        return obj

    Path(path).write_text(tomli_w.dumps(strip_none(cfg.to_dict())))
