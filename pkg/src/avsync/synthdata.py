"""Synthetic audio-visual event clips with exact ground-truth offsets.

Evident classes flash a coloured blob on screen while a tone burst sounds;
ambient classes play continuous noise over a static scene and carry no
timing cue.  Audio is circularly shifted by the clip's offset on a longer
timeline and then both streams are centre-cropped, so wrapped samples never
reach the stored clip.
"""

from __future__ import annotations

import hashlib
import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .encoders import AudioWaveform, VisualClip
from .errors import ConfigError, DataError

EVIDENT = "audio_visual_evident"
AMBIENT = "uniform_ambient"
MISSING = "missing"
CATEGORIES = (EVIDENT, AMBIENT, MISSING)

MANIFEST_NAME = "manifest.json"


@dataclass
class EventClass:
    class_id: int
    name: str
    category: str
    event_rate: float = 0.0  # expected events per second
    event_duration_frames: int = 1
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    blob_radius: int = 6
    position: tuple[float, float] = (16.0, 16.0)  # mean blob centre (row, col)
    position_jitter: float = 3.0
    tone_hz: float = 1000.0
    burst_s: float = 0.12
    ambient_level: float = 0.0
    amplitude_range: tuple[float, float] = (0.5, 1.0)  # per-event intensity, shared by both streams

    def validate(self) -> None:
        if self.category not in CATEGORIES:
            raise ConfigError(f"class {self.name}: unknown category {self.category!r}")
        if self.category == EVIDENT and self.event_rate <= 0:
            raise ConfigError(f"class {self.name}: evident classes need event_rate > 0")
        if self.event_rate < 0 or self.event_duration_frames < 1 or self.blob_radius < 1:
            raise ConfigError(f"class {self.name}: invalid rate/duration/radius")
        lo, hi = self.amplitude_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"class {self.name}: amplitude_range must satisfy 0 < low <= high <= 1")


@dataclass
class SyntheticClip:
    visual: VisualClip
    audio: AudioWaveform
    class_id: int
    category: str
    event_times_frames: list[int]
    true_offset_frames: int
    clip_id: str
    blob_bbox: tuple[int, int, int, int] | None = None  # row0, row1, col0, col1 inclusive

    @property
    def num_frames(self) -> int:
        return self.visual.frames.shape[1]

    @property
    def samples_per_frame(self) -> int:
        return int(round(self.audio.sample_rate / self.visual.fps))

    def sidecar(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "class_id": self.class_id,
            "category": self.category,
            "event_times": list(self.event_times_frames),
            "true_offset": self.true_offset_frames,
            "fps": self.visual.fps,
            "sample_rate": self.audio.sample_rate,
            "num_frames": self.num_frames,
            "frame_shape": list(self.visual.frames.shape),
            "blob_bbox": list(self.blob_bbox) if self.blob_bbox is not None else None,
        }


_PALETTE = [
    (1.0, 0.2, 0.2), (0.2, 1.0, 0.2), (0.2, 0.4, 1.0), (1.0, 1.0, 0.2),
    (1.0, 0.2, 1.0), (0.2, 1.0, 1.0), (1.0, 0.6, 0.1), (0.6, 0.3, 1.0),
    (1.0, 1.0, 1.0), (0.5, 1.0, 0.5), (1.0, 0.5, 0.6), (0.4, 0.8, 1.0),
]


def default_classes(n_evident: int = 12, n_ambient: int = 3, frame_size: int = 32) -> list[EventClass]:
    """Desk-scale class list: evident classes first, then ambient ones."""
    classes = []
    lo, hi = 7.0, frame_size - 7.0
    grid = np.linspace(lo, hi, 3)
    rates = np.linspace(3.5, 5.0, 4)
    tones = np.geomspace(500.0, 5000.0, max(n_evident, 1))
    for i in range(n_evident):
        pos = (float(grid[(i // 3) % 3]), float(grid[i % 3]))
        classes.append(EventClass(
            class_id=i, name=f"evident_{i:02d}", category=EVIDENT,
            event_rate=float(rates[i % len(rates)]),
            event_duration_frames=1 + (i % 5 == 4),
            color=_PALETTE[i % len(_PALETTE)], blob_radius=5 + i % 3,
            position=pos, tone_hz=float(tones[i]), burst_s=0.1 + 0.02 * (i % 3),
        ))
    for j in range(n_ambient):
        classes.append(EventClass(
            class_id=n_evident + j, name=f"ambient_{j:02d}", category=AMBIENT,
            color=_PALETTE[(n_evident + j) % len(_PALETTE)], blob_radius=6,
            position=(float(grid[j % 3]), float(grid[(j + 1) % 3])),
            tone_hz=float(300.0 * (j + 1)), ambient_level=0.15,
        ))
    return classes


def _blob_mask(size: int, center: tuple[float, float], radius: int) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
    return (d2 <= radius ** 2).astype(np.float64)


def _burst(n: int, freq: float, sample_rate: int, phase: float) -> np.ndarray:
    t = np.arange(n) / sample_rate
    return np.hanning(n) * np.sin(2 * np.pi * freq * t + phase)


def generate_clip(cls: EventClass, num_frames: int, fps: float, sample_rate: int, offset_frames: int,
                  rng: np.random.Generator, frame_size: int = 32, visual_noise: float = 0.05,
                  audio_noise: float = 0.05, clip_id: str = "clip") -> SyntheticClip:
    """Render one clip of ``num_frames`` frames whose audio lags the video by ``offset_frames``."""
    cls.validate()
    spf = sample_rate / fps
    if abs(spf - round(spf)) > 1e-9:
        raise ConfigError(f"sample_rate/fps = {spf} must be an integer")
    spf = int(round(spf))
    if num_frames < cls.event_duration_frames:
        raise ConfigError(f"{num_frames} frames cannot hold a {cls.event_duration_frames}-frame event")
    margin = abs(int(offset_frames))
    total = num_frames + 2 * margin
    duration = total / fps

    # event timeline on the long (uncropped) span
    events: list[int] = []
    if cls.category in (EVIDENT, MISSING):
        count = rng.poisson(cls.event_rate * duration)
        times = rng.uniform(0.0, duration, size=count)
        events = sorted({int(t * fps) for t in times})
    amps = {f: rng.uniform(*cls.amplitude_range) for f in events}

    # visual stream
    base = rng.uniform(0.2, 0.4)
    frames = base + visual_noise * rng.standard_normal((total, 3, frame_size, frame_size))
    r = cls.blob_radius
    center = (
        float(np.clip(cls.position[0] + rng.uniform(-1, 1) * cls.position_jitter, r, frame_size - 1 - r)),
        float(np.clip(cls.position[1] + rng.uniform(-1, 1) * cls.position_jitter, r, frame_size - 1 - r)),
    )
    mask = _blob_mask(frame_size, center, r)
    color = np.asarray(cls.color)[:, None, None]
    if cls.category == AMBIENT:
        frames += 0.3 * color * mask  # static object, never flashes
    visual_on = np.zeros(total)
    for f in events:
        for k in range(cls.event_duration_frames):
            if f + k < total:
                visual_on[f + k] = max(visual_on[f + k], amps[f])
    frames += visual_on[:, None, None, None] * 0.6 * color * mask
    np.clip(frames, 0.0, 1.0, out=frames)

    # audio stream
    n_samples = total * spf
    audio = audio_noise * rng.standard_normal(n_samples)
    if cls.category == EVIDENT:
        burst_len = int(cls.burst_s * sample_rate)
        for f in events:
            centre = int(round((f + cls.event_duration_frames / 2) * spf))
            start = centre - burst_len // 2
            lo, hi = max(start, 0), min(start + burst_len, n_samples)
            if hi <= lo:
                continue
            b = _burst(burst_len, cls.tone_hz, sample_rate, rng.uniform(0, 2 * np.pi))
            audio[lo:hi] += 0.5 * amps[f] * b[lo - start:hi - start]
    elif cls.category == AMBIENT:
        t = np.arange(n_samples) / sample_rate
        hum = np.sin(2 * np.pi * cls.tone_hz * t + rng.uniform(0, 2 * np.pi))
        audio += cls.ambient_level * (hum + rng.standard_normal(n_samples))

    audio = np.roll(audio, int(offset_frames) * spf)
    frames = frames[margin:margin + num_frames]
    audio = audio[margin * spf:(margin + num_frames) * spf]
    kept = [f - margin for f in events if margin <= f < margin + num_frames]
    bbox = (int(np.floor(center[0] - r)), int(np.ceil(center[0] + r)),
            int(np.floor(center[1] - r)), int(np.ceil(center[1] + r)))
    return SyntheticClip(
        visual=VisualClip(np.ascontiguousarray(frames.transpose(1, 0, 2, 3)), fps),
        audio=AudioWaveform(audio, sample_rate),
        class_id=cls.class_id, category=cls.category, event_times_frames=kept,
        true_offset_frames=int(offset_frames), clip_id=clip_id,
        blob_bbox=bbox,
    )


# --------------------------------------------------------------------------
# energy oracles


def visual_energy(frames: np.ndarray) -> np.ndarray:
    """Mean squared pixel value per frame of ``[3, T, H, W]``."""
    return (frames ** 2).mean(axis=(0, 2, 3))


def audio_energy(samples: np.ndarray, samples_per_frame: int) -> np.ndarray:
    n = len(samples) // samples_per_frame
    return (samples[:n * samples_per_frame].reshape(n, samples_per_frame) ** 2).mean(axis=1)


def energy_xcorr(v_energy: np.ndarray, a_energy: np.ndarray, max_lag: int) -> dict[int, float]:
    """Pearson correlation of ``v[t]`` with ``a[t + d]`` over their overlap, for each lag ``d``."""
    T = len(v_energy)
    out = {}
    for d in range(-max_lag, max_lag + 1):
        lo, hi = max(0, -d), min(T, T - d)
        v, a = v_energy[lo:hi], a_energy[lo + d:hi + d]
        v, a = v - v.mean(), a - a.mean()
        denom = np.sqrt((v ** 2).sum() * (a ** 2).sum())
        out[d] = float((v * a).sum() / denom) if denom > 0 else 0.0
    return out


def energy_lag(clip: SyntheticClip, max_lag: int) -> int:
    """Lag with the highest energy correlation (ties go to the smallest |lag|)."""
    v = visual_energy(clip.visual.frames)
    a = audio_energy(clip.audio.samples, clip.samples_per_frame)
    xc = energy_xcorr(v, a, max_lag)
    return max(xc, key=lambda d: (xc[d], -abs(d)))


# --------------------------------------------------------------------------
# masking


def mask_frames(clip: SyntheticClip, modality: str, n_frames: int, rng: np.random.Generator,
                start: int | None = None) -> SyntheticClip:
    """Zero a contiguous run of ``n_frames`` visual frames and/or the matching audio span."""
    if modality not in ("audio", "visual", "both"):
        raise ValueError(f"modality must be audio, visual or both, got {modality!r}")
    T = clip.num_frames
    if n_frames < 0 or n_frames >= T:
        raise DataError(f"cannot mask {n_frames} of {T} frames")
    if n_frames == 0:
        return clip
    if start is None:
        start = int(rng.integers(0, T - n_frames + 1))
    frames = clip.visual.frames.copy()
    samples = clip.audio.samples.copy()
    if modality in ("visual", "both"):
        frames[:, start:start + n_frames] = 0.0
    if modality in ("audio", "both"):
        spf = clip.samples_per_frame
        samples[start * spf:(start + n_frames) * spf] = 0.0
    return SyntheticClip(
        visual=VisualClip(frames, clip.visual.fps), audio=AudioWaveform(samples, clip.audio.sample_rate),
        class_id=clip.class_id, category=clip.category, event_times_frames=list(clip.event_times_frames),
        true_offset_frames=clip.true_offset_frames, clip_id=clip.clip_id, blob_bbox=clip.blob_bbox)


# --------------------------------------------------------------------------
# datasets on disk


def clip_rng(seed: int, split: str, index: int) -> np.random.Generator:
    code = {"train": 1, "test": 2}.get(split, 3)
    return np.random.default_rng(np.random.SeedSequence([seed, code, index]))


def _write_wav(path: Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def _read_wav(path: Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise DataError(f"{path}: expected mono PCM16")
        rate = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, rate


def write_clip(clip: SyntheticClip, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    clip.visual.frames.astype("<f4").tofile(directory / f"{clip.clip_id}.frames.f32")
    _write_wav(directory / f"{clip.clip_id}.wav", clip.audio.samples, clip.audio.sample_rate)
    (directory / f"{clip.clip_id}.json").write_text(json.dumps(clip.sidecar(), sort_keys=True, indent=1))


def read_clip(directory: Path, clip_id: str) -> SyntheticClip:
    directory = Path(directory)
    try:
        meta = json.loads((directory / f"{clip_id}.json").read_text())
        frames = np.fromfile(directory / f"{clip_id}.frames.f32", dtype="<f4")
        samples, rate = _read_wav(directory / f"{clip_id}.wav")
    except FileNotFoundError as exc:
        raise DataError(f"clip {clip_id}: missing file {exc.filename}") from exc
    shape = tuple(meta["frame_shape"])
    if frames.size != int(np.prod(shape)):
        raise DataError(f"clip {clip_id}: frame file has {frames.size} values, expected {shape}")
    bbox = meta.get("blob_bbox")
    return SyntheticClip(
        visual=VisualClip(frames.reshape(shape).astype(np.float64), meta["fps"]),
        audio=AudioWaveform(samples, rate),
        class_id=meta["class_id"], category=meta["category"], event_times_frames=meta["event_times"],
        true_offset_frames=meta["true_offset"], clip_id=clip_id,
        blob_bbox=tuple(bbox) if bbox is not None else None)


@dataclass
class SplitDataset:
    """One split directory: manifest plus per-clip files, loaded lazily."""

    root: Path
    manifest: dict = field(repr=False)

    @classmethod
    def open(cls, root: str | Path) -> "SplitDataset":
        root = Path(root)
        path = root / MANIFEST_NAME
        try:
            manifest = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise DataError(f"split manifest not found: {path}") from exc
        return cls(root, manifest)

    def __len__(self) -> int:
        return len(self.manifest["clips"])

    @property
    def clip_ids(self) -> list[str]:
        return [c["clip_id"] for c in self.manifest["clips"]]

    @property
    def classes(self) -> list[EventClass]:
        out = []
        for c in self.manifest["classes"]:
            c = dict(c)
            c["color"] = tuple(c["color"])
            c["position"] = tuple(c["position"])
            c["amplitude_range"] = tuple(c["amplitude_range"])
            out.append(EventClass(**c))
        return out

    def entry(self, index: int) -> dict:
        return self.manifest["clips"][index]

    def __getitem__(self, index: int) -> SyntheticClip:
        return read_clip(self.root, self.manifest["clips"][index]["clip_id"])

    def __iter__(self) -> Iterator[SyntheticClip]:
        for i in range(len(self)):
            yield self[i]

    def manifest_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.manifest, sort_keys=True).encode()).hexdigest()[:16]


def _write_split(root: Path, split: str, classes: Sequence[EventClass], count: int, seed: int,
                 num_frames: int, fps: float, sample_rate: int, frame_size: int, max_offset: int,
                 visual_noise: float, audio_noise: float) -> dict:
    directory = root / split
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        rng = clip_rng(seed, split, i)
        cls = classes[i % len(classes)]
        offset = 0 if split == "train" else int(rng.integers(-max_offset, max_offset + 1))
        clip_id = f"{split}-{i:06d}"
        clip = generate_clip(cls, num_frames, fps, sample_rate, offset, rng, frame_size,
                             visual_noise, audio_noise, clip_id)
        write_clip(clip, directory)
        entries.append({"clip_id": clip_id, "class_id": cls.class_id, "category": cls.category,
                        "true_offset": offset})
    manifest = {
        "split": split, "seed": seed, "num_frames": num_frames, "fps": fps, "sample_rate": sample_rate,
        "frame_size": frame_size, "max_offset": max_offset if split != "train" else 0,
        "classes": [asdict(c) for c in classes], "clips": entries,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def generate_dataset(classes: Sequence[EventClass], n_train: int, n_test: int, seed: int, out: str | Path,
                     num_frames: int = 45, fps: float = 5.0, sample_rate: int = 16000, frame_size: int = 32,
                     max_offset: int = 15, visual_noise: float = 0.05, audio_noise: float = 0.05) -> Path:
    """Write ``train/`` and ``test/`` splits under ``out``; returns ``out``.

    Train clips are aligned (offset 0); test offsets are uniform on
    ``[-max_offset, max_offset]``.  Each clip's randomness comes only from
    ``(seed, split, index)``.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must be >= 1")
    for c in classes:
        c.validate()
    out = Path(out)
    try:
        for split, count in (("train", n_train), ("test", n_test)):
            _write_split(out, split, classes, count, seed, num_frames, fps, sample_rate, frame_size,
                         max_offset, visual_noise, audio_noise)
    except OSError as exc:
        raise DataError(f"cannot write dataset under {out}: {exc}") from exc
    return out
