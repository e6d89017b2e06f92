"""Contrastive training: InfoNCE over k x k joint scores, two-stage curriculum."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import ops
from .config import ExperimentConfig
from .errors import ConfigError, NumericError, SamplingError
from .model import AVSTModel, save_checkpoint
from .synthdata import SplitDataset, SyntheticClip
from .tensor import Tape, Tensor

STAGE_CORRESPONDENCE = 1
STAGE_SYNC = 2


def info_nce(scores: Tensor) -> Tensor:
    """Mean over rows of ``-log softmax(scores[i])[i]``."""
    k = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != k or k < 2:
        raise ConfigError(f"info_nce needs a square k x k matrix with k >= 2, got {scores.shape}")
    logp = ops.log_softmax(scores, axis=1)
    diag = ops.mul(logp, np.eye(k))
    return ops.mul(ops.sum(diag), -1.0 / k)


@dataclass
class MiniBatch:
    frames: np.ndarray  # [k, 3, T, H, W]
    audio: np.ndarray  # [k, T * samples_per_frame]
    stage: int
    source_ids: list[str]
    starts: list[int]
    offsets: list[int] = field(default_factory=list)  # stage 2: shift of each row from the anchor

    @property
    def k(self) -> int:
        return self.frames.shape[0]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[2]


def _crop(clip: SyntheticClip, start: int, length: int) -> tuple[np.ndarray, np.ndarray]:
    spf = clip.samples_per_frame
    return (clip.visual.frames[:, start:start + length],
            clip.audio.samples[start * spf:(start + length) * spf])


def sample_stage1_batch(clips: list[SyntheticClip], length: int, rng: np.random.Generator) -> MiniBatch:
    """Aligned crops from ``k`` different videos (correspondence negatives)."""
    if len(clips) < 2:
        raise SamplingError("stage-1 batches need at least 2 clips")
    if len({c.clip_id for c in clips}) != len(clips):
        raise SamplingError("stage-1 batch clips must come from distinct videos")
    frames, audio, starts = [], [], []
    for clip in clips:
        if clip.num_frames < length:
            raise SamplingError(f"clip {clip.clip_id} has {clip.num_frames} frames; need {length}")
        s = int(rng.integers(0, clip.num_frames - length + 1))
        v, a = _crop(clip, s, length)
        frames.append(v)
        audio.append(a)
        starts.append(s)
    return MiniBatch(np.stack(frames), np.stack(audio), STAGE_CORRESPONDENCE,
                     [c.clip_id for c in clips], starts)


def sample_stage2_offsets(k: int, max_offset: int, rng: np.random.Generator) -> list[int]:
    """``0`` followed by ``k - 1`` distinct nonzero offsets in ``[-max_offset, max_offset]``."""
    pool = [d for d in range(-max_offset, max_offset + 1) if d != 0]
    if k - 1 > len(pool):
        raise SamplingError(f"k={k} needs {k - 1} distinct nonzero offsets; only {len(pool)} "
                            f"exist within +-{max_offset}")
    return [0] + [int(d) for d in rng.choice(pool, size=k - 1, replace=False)]


def sample_stage2_batch(video: SyntheticClip, k: int, max_offset: int, length: int,
                        rng: np.random.Generator) -> MiniBatch:
    """``k`` aligned crops of one video at anchor ``t`` shifted by distinct offsets.

    Row ``i`` holds the aligned pair at ``t + d_i``, so pairing visual ``i``
    with audio ``j`` is a synchronisation negative at relative offset
    ``d_j - d_i``.  Row 0 is the anchor (``d = 0``).
    """
    need = length + 2 * max_offset
    if video.num_frames < need:
        raise SamplingError(f"video {video.clip_id} has {video.num_frames} frames; stage-2 sampling "
                            f"with T={length} and max offset {max_offset} needs {need}")
    offsets = sample_stage2_offsets(k, max_offset, rng)
    anchor = int(rng.integers(max_offset, video.num_frames - length - max_offset + 1))
    frames, audio, starts = [], [], []
    for d in offsets:
        v, a = _crop(video, anchor + d, length)
        frames.append(v)
        audio.append(a)
        starts.append(anchor + d)
    return MiniBatch(np.stack(frames), np.stack(audio), STAGE_SYNC, [video.clip_id] * k, starts, offsets)


class OptimizerState:
    """Adam with bias correction and optional global-norm gradient clipping."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = 5.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in self.params if p.grad is not None)))

    def step(self) -> None:
        scale = 1.0
        if self.grad_clip is not None:
            norm = self.global_norm()
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr:
                p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(batch: MiniBatch, model: AVSTModel, opt: OptimizerState) -> float:
    """score matrix -> InfoNCE -> backward -> Adam; returns the pre-update loss."""
    model.zero_grad()
    with Tape() as tape:
        scores = model.score_matrix(batch.frames, batch.audio)
        bad = np.argwhere(~np.isfinite(scores.data))
        if bad.size:
            i, j = (int(x) for x in bad[0])
            raise NumericError(f"non-finite score for pair (visual {i}: {batch.source_ids[i]}@{batch.starts[i]}, "
                               f"audio {j}: {batch.source_ids[j]}@{batch.starts[j]})")
        loss = info_nce(scores)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} in stage-{batch.stage} batch")
        tape.backward(loss)
    opt.step()
    return value


@dataclass
class CurriculumResult:
    checkpoint: Path
    losses: list[float]
    steps: int


def learning_rate(base: float, schedule: str, step: int, total: int) -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + np.cos(np.pi * step / max(total, 1)))
    raise ConfigError(f"unknown lr schedule {schedule!r}")


def sample_length(rng: np.random.Generator, lo: int, hi: int, bias: float = 0.0) -> int:
    """Clip length in ``[lo, hi]`` with ``P(T) ~ T ** -bias``; ``bias = 0`` is uniform."""
    if bias == 0:
        return int(rng.integers(lo, hi + 1))
    lengths = np.arange(lo, hi + 1)
    weights = lengths.astype(np.float64) ** -bias
    return int(rng.choice(lengths, p=weights / weights.sum()))


def _batch_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7, stage, step]))


def run_curriculum(cfg: ExperimentConfig, dataset: SplitDataset, model: AVSTModel, out_dir: str | Path,
                   log: Callable[[dict], None] | None = None) -> CurriculumResult:
    """Stage 1 (cross-video batches) then stage 2 (same-video offset batches).

    Writes ``train_log.jsonl`` and one checkpoint per epoch to ``out_dir``;
    the last one is also saved as ``final.ckpt``.
    """
    tc = cfg.train
    k = int(tc.batch_size.get(model.variant, 0))
    if k < 2:
        raise ConfigError(f"train.batch_size[{model.variant!r}] must be >= 2")
    if k > len(dataset):
        raise ConfigError(f"batch size {k} exceeds the {len(dataset)} training clips")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps_per_epoch = tc.steps_per_epoch or max(1, len(dataset) // k)
    stage1_epochs = int(round(tc.epochs * tc.stage1_fraction))
    total_steps = steps_per_epoch * tc.epochs
    fixed = model.variant in tc.fixed_length_variants
    opt = OptimizerState(model.parameters(), tc.lr, tuple(tc.betas), tc.adam_eps, tc.grad_clip)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    stage2_pool = np.arange(len(dataset))
    if tc.stage2_evident_only:
        stage2_pool = np.array([i for i in range(len(dataset))
                                if dataset.entry(i)["category"] == "audio_visual_evident"], dtype=np.int64)
        if stage2_pool.size == 0:
            raise ConfigError("train.stage2_evident_only is set but the dataset has no evident clips")
    losses: list[float] = []
    step = 0
    order: list[int] = []
    ckpt = out / "final.ckpt"
    with open(out / "train_log.jsonl", "w") as fh:
        for epoch in range(tc.epochs):
            stage = STAGE_CORRESPONDENCE if epoch < stage1_epochs else STAGE_SYNC
            for _ in range(steps_per_epoch):
                rng = _batch_rng(cfg.seed, stage, step)
                length = tc.min_frames if fixed else sample_length(rng, tc.min_frames, tc.max_frames, tc.length_bias)
                need = k if stage == STAGE_CORRESPONDENCE else 1
                if tc.stage2_evident_only and step == stage1_epochs * steps_per_epoch:
                    order = []  # drop stage-1 leftovers, which may include ambient clips
                if len(order) < need:
                    pool = stage2_pool if stage == STAGE_SYNC else np.arange(len(dataset))
                    order = [int(i) for i in order_rng.permutation(pool)]
                picked, order = order[:need], order[need:]
                if stage == STAGE_CORRESPONDENCE:
                    batch = sample_stage1_batch([dataset[i] for i in picked], length, rng)
                else:
                    batch = sample_stage2_batch(dataset[picked[0]], k, tc.max_offset, length, rng)
                opt.lr = learning_rate(tc.lr, tc.lr_schedule, step, total_steps)
                t0 = time.perf_counter()
                loss = train_step(batch, model, opt)
                entry = {"step": step, "stage": stage, "epoch": epoch, "loss": loss, "lr": opt.lr,
                         "num_frames": length, "distinct_sources": len(set(batch.source_ids)),
                         "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
                fh.write(json.dumps(entry) + "\n")
                if log is not None:
                    log(entry)
                losses.append(loss)
                step += 1
            fh.flush()
            ckpt_epoch = out / f"epoch-{epoch:03d}.ckpt"
            save_checkpoint(model, ckpt_epoch, {"epoch": epoch, "step": step, "config_digest": cfg.digest()})
    save_checkpoint(model, ckpt, {"epoch": tc.epochs - 1, "step": step, "config_digest": cfg.digest()})
    return CurriculumResult(ckpt, losses, step)
