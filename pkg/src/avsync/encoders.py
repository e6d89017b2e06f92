"""Visual and audio front ends.

The visual encoder maps RGB clips ``[B, 3, T, H, W]`` to dense features
``[B, c, T, h, w]``: per-frame stride-2 2-D convolutions followed by one 3-D
convolution over (time, height, width).  The audio encoder maps magnitude
spectrograms ``[B, 1, F, W]`` to ``[B, c, t_a]`` by a patch convolution that
spans the whole frequency axis, then a temporal convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .config import ModelConfig
from .errors import ConfigError, DataError
from .nn import Module, kaiming_uniform
from .tensor import Tensor


@dataclass
class VisualClip:
    frames: np.ndarray  # [3, T, H, W], values in [0, 1]
    fps: float

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]


@dataclass
class AudioWaveform:
    samples: np.ndarray  # [N]
    sample_rate: int


@dataclass
class Spectrogram:
    values: np.ndarray  # [1, H_a, W_a], non-negative

    @property
    def num_frames(self) -> int:
        return self.values.shape[-1]


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def num_stft_frames(num_samples: int, window: int, hop: int) -> int:
    return (num_samples - window) // hop + 1


def stft_magnitude_batch(samples: np.ndarray, window: int = 320, hop: int = 40) -> np.ndarray:
    """Hann-windowed |DFT| of ``samples[..., N]`` -> ``[..., window//2 + 1, frames]``.

    Frame ``f`` covers samples ``[f*hop, f*hop + window)``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if samples.shape[-1] < window:
        raise DataError(f"waveform of {samples.shape[-1]} samples is shorter than the "
                        f"STFT window ({window})")
    frames = sliding_window_view(samples, window, axis=-1)[..., ::hop, :]
    mag = np.abs(np.fft.rfft(frames * hann(window), axis=-1))
    return np.swapaxes(mag, -1, -2)


def stft_magnitude(wave: AudioWaveform, window: int = 320, hop: int = 40) -> Spectrogram:
    return Spectrogram(stft_magnitude_batch(wave.samples, window, hop)[None])


def audio_frontend(samples: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Waveform batch ``[B, N]`` -> magnitude spectrogram ``[B, 1, F, N // hop]``.

    The waveform is zero-padded by ``(window - hop) / 2`` on both sides so the
    spectrogram has exactly ``N / hop`` frames, each centred on its hop.
    """
    samples = np.atleast_2d(samples)
    pad = (cfg.stft_window - cfg.stft_hop) // 2
    padded = np.pad(samples, [(0, 0), (pad, pad)])
    mag = stft_magnitude_batch(padded, cfg.stft_window, cfg.stft_hop)
    return mag[:, None]


class VisualEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        widths = [3] + list(cfg.visual_widths)
        self.convs = []
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            w = Tensor(kaiming_uniform(rng, (cout, cin, 3, 3)), requires_grad=True, name=f"conv{i}.w")
            b = Tensor(np.zeros(cout), requires_grad=True, name=f"conv{i}.b")
            self.convs.append((w, b))
        kt = cfg.temporal_kernel
        if kt % 2 == 0:
            raise ConfigError("temporal_kernel must be odd to preserve t_v")
        self.temporal_w = Tensor(kaiming_uniform(rng, (cfg.channels, widths[-1], kt, 3, 3)), requires_grad=True)
        self.temporal_b = Tensor(np.zeros(cfg.channels), requires_grad=True)

    def named_parameters(self):
        for i, (w, b) in enumerate(self.convs):
            yield f"conv{i}.weight", w
            yield f"conv{i}.bias", b
        yield "temporal.weight", self.temporal_w
        yield "temporal.bias", self.temporal_b

    def __call__(self, frames) -> Tensor:
        """``[B, 3, T, H, W]`` -> ``[B, c, T, h, w]``."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.ndim != 5 or x.shape[1] != 3 or x.shape[3] != self.cfg.frame_size or x.shape[4] != self.cfg.frame_size:
            raise ConfigError(f"visual input must be [B, 3, T, {self.cfg.frame_size}, "
                              f"{self.cfg.frame_size}], got {x.shape}")
        B, _, T, H, W = x.shape
        x = ops.reshape(ops.transpose(x, (0, 2, 1, 3, 4)), (B * T, 3, H, W))
        for w, b in self.convs:
            x = ops.relu(ops.conv2d(x, w, b, stride=2, padding=1))
        _, C, h, wd = x.shape
        x = ops.transpose(ops.reshape(x, (B, T, C, h, wd)), (0, 2, 1, 3, 4))
        kt = self.cfg.temporal_kernel
        return ops.conv3d(x, self.temporal_w, self.temporal_b, stride=1, padding=(kt // 2, 1, 1))


class AudioEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        F, S = cfg.freq_bins, cfg.audio_time_stride
        self.patch_w = Tensor(kaiming_uniform(rng, (cfg.audio_hidden, 1, F, S)), requires_grad=True)
        self.patch_b = Tensor(np.zeros(cfg.audio_hidden), requires_grad=True)
        self.temporal_w = Tensor(kaiming_uniform(rng, (cfg.channels, cfg.audio_hidden, 1, 3)), requires_grad=True)
        self.temporal_b = Tensor(np.zeros(cfg.channels), requires_grad=True)

    def named_parameters(self):
        yield "patch.weight", self.patch_w
        yield "patch.bias", self.patch_b
        yield "temporal.weight", self.temporal_w
        yield "temporal.bias", self.temporal_b

    @staticmethod
    def _standardise(x: Tensor) -> Tensor:
        B, _, F, W = x.shape
        n = F * W
        flat = ops.layer_norm(ops.reshape(x, (B, n)), Tensor(np.ones(n)), Tensor(np.zeros(n)), eps=1e-6)
        return ops.reshape(flat, (B, 1, F, W))

    def output_steps(self, spec_frames: int) -> int:
        return spec_frames // self.cfg.audio_time_stride

    def __call__(self, spec) -> Tensor:
        """``[B, 1, F, W_a]`` magnitude spectrogram -> ``[B, c, W_a // stride]``.

        Magnitudes are compressed with ``log(1 + x)`` and standardised per
        example.  Without the standardisation the all-positive input lets a
        single optimiser step push every patch unit below zero.
        """
        x = ops.log(ops.add(spec, 1.0)) if isinstance(spec, Tensor) else Tensor(np.log1p(spec))
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.cfg.freq_bins:
            raise ConfigError(f"audio input must be [B, 1, {self.cfg.freq_bins}, W], got {x.shape}")
        x = self._standardise(x)
        if x.shape[3] < self.cfg.audio_time_stride:
            raise ConfigError(f"spectrogram has {x.shape[3]} frames; need >= {self.cfg.audio_time_stride}")
        S = self.cfg.audio_time_stride
        x = ops.relu(ops.conv2d(x, self.patch_w, self.patch_b, stride=(self.cfg.freq_bins, S)))
        x = ops.conv2d(x, self.temporal_w, self.temporal_b, stride=1, padding=(0, 1))
        B, C, _, ta = x.shape
        return ops.reshape(x, (B, C, ta))


def encode_visual(clip: VisualClip, encoder: VisualEncoder) -> Tensor:
    """Single clip ``[3, T, H, W]`` -> feature ``[c, T, h, w]``."""
    return encoder(clip.frames[None])[0]


def encode_audio(spec: Spectrogram, encoder: AudioEncoder) -> Tensor:
    """Single magnitude spectrogram ``[1, F, W]`` -> ``[c, t_a]``."""
    return encoder(spec.values[None])[0]
