"""Dense offset-grid evaluation, robustness sweeps, heatmaps and depth ablation."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ProtocolError, UnsupportedVariantError
from .encoders import AudioWaveform, VisualClip
from .synthdata import AMBIENT, EVIDENT, SplitDataset, SyntheticClip, mask_frames


class WindowScorer(Protocol):
    def score_windows(self, frames: np.ndarray, windows: np.ndarray) -> np.ndarray: ...

    def fingerprint(self) -> str: ...


@dataclass(frozen=True)
class OffsetGrid:
    offsets: tuple[int, ...]

    @classmethod
    def symmetric(cls, grid_max: int = 15) -> "OffsetGrid":
        if grid_max < 0:
            raise ConfigError("grid_max must be >= 0")
        return cls(tuple(range(-grid_max, grid_max + 1)))

    def __post_init__(self):
        offs = self.offsets
        if 0 not in offs or sorted(offs) != list(offs) or [-d for d in reversed(offs)] != list(offs):
            raise ConfigError(f"offset grid must be sorted, contain 0 and be symmetric: {offs}")

    def __len__(self) -> int:
        return len(self.offsets)

    @property
    def max_abs(self) -> int:
        return max(abs(d) for d in self.offsets)


@dataclass
class SyncScoreMatrix:
    clip_id: str
    scores: np.ndarray
    offsets: tuple[int, ...]
    predicted_offset: int
    true_offset: int


def pick_offset(scores: np.ndarray, offsets: Sequence[int]) -> int:
    """Argmax; exact ties go to the smallest |offset|, then the negative one."""
    best = max(range(len(offsets)), key=lambda i: (scores[i], -abs(offsets[i]), -offsets[i]))
    return int(offsets[best])


def is_correct(pred_offset: int, true_offset: int, tolerance_frames: int) -> bool:
    if tolerance_frames < 0:
        raise ConfigError("tolerance must be >= 0")
    return abs(pred_offset - true_offset) <= tolerance_frames


def required_span(length: int, grid: OffsetGrid) -> int:
    return length + 2 * grid.max_abs


def _window_start(clip: SyntheticClip, length: int) -> int:
    return (clip.num_frames - length) // 2


def offset_windows(clip: SyntheticClip, length: int, grid: OffsetGrid) -> tuple[np.ndarray, np.ndarray]:
    """Centred visual window ``[3, T, H, W]`` and one audio window per grid offset ``[G, T*spf]``."""
    need = required_span(length, grid)
    if length < 1 or clip.num_frames < need:
        raise ProtocolError(f"clip {clip.clip_id} has {clip.num_frames} frames; scoring T={length} over "
                            f"+-{grid.max_abs} needs at least {need}")
    s = _window_start(clip, length)
    spf = clip.samples_per_frame
    frames = clip.visual.frames[:, s:s + length]
    windows = np.stack([clip.audio.samples[(s + d) * spf:(s + d + length) * spf] for d in grid.offsets])
    return frames, windows


def _mask_pairs(clip: SyntheticClip, frames: np.ndarray, windows: np.ndarray, modality: str, n_frames: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Mask the same relative span of the visual window and of every audio window."""
    length = frames.shape[1]
    start = int(rng.integers(0, length - n_frames + 1))
    out_frames, out_windows = None, []
    for w in windows:
        pair = SyntheticClip(VisualClip(frames, clip.visual.fps), AudioWaveform(w, clip.audio.sample_rate),
                             clip.class_id, clip.category, clip.event_times_frames, clip.true_offset_frames,
                             clip.clip_id, clip.blob_bbox)
        masked = mask_frames(pair, modality, n_frames, rng, start=start)
        out_frames = masked.visual.frames
        out_windows.append(masked.audio.samples)
    return out_frames, np.stack(out_windows)


def score_offsets(clip: SyntheticClip, model: WindowScorer, grid: OffsetGrid, length: int,
                  mask: tuple[str, int] | None = None, rng: np.random.Generator | None = None) -> SyncScoreMatrix:
    """Score the centred ``length``-frame visual window against audio shifted by each grid offset."""
    frames, windows = offset_windows(clip, length, grid)
    if mask is not None and mask[1] > 0:
        if rng is None:
            raise ConfigError("masked scoring needs an rng")
        frames, windows = _mask_pairs(clip, frames, windows, mask[0], mask[1], rng)
    scores = np.asarray(model.score_windows(frames, windows), dtype=np.float64)
    if scores.shape != (len(grid),):
        raise ProtocolError(f"model returned {scores.shape} scores for a grid of {len(grid)}")
    if not np.all(np.isfinite(scores)):
        raise NumericError(f"non-finite score on clip {clip.clip_id} at T={length}")
    return SyncScoreMatrix(clip.clip_id, scores, grid.offsets, pick_offset(scores, grid.offsets),
                           clip.true_offset_frames)


@dataclass
class Prediction:
    clip_id: str
    class_id: int
    category: str
    length: int
    predicted: int
    true: int


def _acc(preds: list[Prediction], tol: int) -> float:
    if not preds:
        return float("nan")
    return sum(is_correct(p.predicted, p.true, tol) for p in preds) / len(preds)


@dataclass
class EvalReport:
    overall_accuracy: float
    per_class: dict[str, float]
    per_length: dict[str, float]
    per_category: dict[str, float]
    per_category_length: dict[str, dict[str, float]]
    per_class_counts: dict[str, int]
    tolerance: int
    clip_count: int
    grid: list[int]
    lengths: list[int]
    config_hash: str
    manifest_hash: str
    predictions: list[Prediction] = field(repr=False, default_factory=list)
    mask: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        raw = json.loads(Path(path).read_text())
        raw["predictions"] = [Prediction(**p) for p in raw["predictions"]]
        return cls(**raw)

    def at_tolerance(self, tolerance: int) -> "EvalReport":
        """Same predictions re-scored with another tolerance."""
        return build_report(self.predictions, tolerance, self.grid, self.lengths, self.config_hash,
                            self.manifest_hash, self.mask)

    def accuracy(self, category: str | None = None, length: int | None = None) -> float:
        sel = [p for p in self.predictions
               if (category is None or p.category == category) and (length is None or p.length == length)]
        return _acc(sel, self.tolerance)


def build_report(preds: list[Prediction], tolerance: int, grid: Sequence[int], lengths: Sequence[int],
                 config_hash: str, manifest_hash: str, mask: dict | None = None) -> EvalReport:
    by_class: dict[int, list[Prediction]] = {}
    by_length: dict[int, list[Prediction]] = {}
    by_cat: dict[str, list[Prediction]] = {}
    clips_per_class: dict[int, set[str]] = {}
    for p in preds:
        by_class.setdefault(p.class_id, []).append(p)
        by_length.setdefault(p.length, []).append(p)
        by_cat.setdefault(p.category, []).append(p)
        clips_per_class.setdefault(p.class_id, set()).add(p.clip_id)
    return EvalReport(
        overall_accuracy=_acc(preds, tolerance),
        per_class={str(c): _acc(v, tolerance) for c, v in sorted(by_class.items())},
        per_length={str(t): _acc(v, tolerance) for t, v in sorted(by_length.items())},
        per_category={c: _acc(v, tolerance) for c, v in sorted(by_cat.items())},
        per_category_length={c: {str(t): _acc([p for p in v if p.length == t], tolerance)
                                 for t in sorted({p.length for p in v})} for c, v in sorted(by_cat.items())},
        per_class_counts={str(c): len(v) for c, v in sorted(clips_per_class.items())},
        tolerance=int(tolerance), clip_count=len({p.clip_id for p in preds}),
        grid=[int(d) for d in grid], lengths=[int(t) for t in lengths],
        config_hash=config_hash, manifest_hash=manifest_hash, predictions=list(preds), mask=mask,
    )


def _config_hash(model: WindowScorer, grid: OffsetGrid, tolerance: int, lengths: Sequence[int]) -> str:
    blob = json.dumps({"model": model.fingerprint(), "grid": list(grid.offsets), "tolerance": tolerance,
                       "lengths": list(lengths)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def evaluate(split: SplitDataset, model: WindowScorer, grid: OffsetGrid, tolerance: int,
             lengths: Sequence[int], mask: tuple[str, int] | None = None, seed: int = 0) -> EvalReport:
    """Score every clip at every length; a pure function of model, split and settings."""
    if tolerance < 0:
        raise ConfigError("tolerance must be >= 0")
    if not lengths:
        raise ConfigError("at least one clip length is required")
    preds = []
    for index in range(len(split)):
        clip = split[index]
        for length in lengths:
            rng = np.random.default_rng(np.random.SeedSequence([seed, index, length]))
            m = score_offsets(clip, model, grid, length, mask=mask, rng=rng)
            preds.append(Prediction(clip.clip_id, int(clip.class_id), clip.category, int(length),
                                    m.predicted_offset, int(m.true_offset)))
    mask_info = {"modality": mask[0], "frames": int(mask[1])} if mask is not None else None
    return build_report(preds, tolerance, grid.offsets, lengths, _config_hash(model, grid, tolerance, lengths),
                        split.manifest_hash(), mask_info)


def chance_rate(grid: OffsetGrid, tolerance: int, true_offsets: Sequence[int] | None = None) -> float:
    """Expected accuracy of a uniformly random argmax over ``grid``.

    Without ``true_offsets`` this is the interior rate ``(2*tol + 1) / |grid|``;
    with them, grid edges are accounted for exactly.
    """
    offs = np.asarray(grid.offsets)
    if true_offsets is None:
        return min(2 * tolerance + 1, len(offs)) / len(offs)
    hits = [np.sum(np.abs(offs - t) <= tolerance) / len(offs) for t in true_offsets]
    return float(np.mean(hits))


class RandomScorer:
    """Scores drawn i.i.d. from a seeded normal; a chance-level baseline."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def score_windows(self, frames: np.ndarray, windows: np.ndarray) -> np.ndarray:
        return self.rng.standard_normal(windows.shape[0])

    def fingerprint(self) -> str:
        return f"random-{self.seed}"


class ConstantScorer:
    """Every offset scores the same, so tie-breaking alone picks the answer."""

    def score_windows(self, frames: np.ndarray, windows: np.ndarray) -> np.ndarray:
        return np.zeros(windows.shape[0])

    def fingerprint(self) -> str:
        return "constant"


# --------------------------------------------------------------------------
# robustness


@dataclass
class RobustnessResult:
    reports: dict[tuple[str, int], EvalReport]

    def table(self) -> list[dict]:
        rows = []
        for (modality, n), rep in sorted(self.reports.items()):
            for t, acc in rep.per_length.items():
                rows.append({"modality": modality, "mask_frames": n, "length": int(t), "accuracy": acc})
        return rows

    def drop(self, modality: str, n: int, length: int, category: str | None = None) -> float:
        base = self.reports[(modality, 0)] if (modality, 0) in self.reports else self.reports[("none", 0)]
        return base.accuracy(category, length) - self.reports[(modality, n)].accuracy(category, length)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, ["modality", "mask_frames", "length", "accuracy"])
            writer.writeheader()
            writer.writerows(self.table())


def robustness_sweep(split: SplitDataset, model: WindowScorer, modalities: Sequence[str],
                     mask_lengths: Sequence[int], grid: OffsetGrid, tolerance: int, lengths: Sequence[int],
                     seed: int = 0) -> RobustnessResult:
    """One EvalReport per (modality, mask length); mask length 0 is the unmasked run."""
    if any(n < 0 or n >= min(lengths) for n in mask_lengths):
        raise ConfigError(f"mask lengths {list(mask_lengths)} must be in [0, {min(lengths) - 1}]")
    reports: dict[tuple[str, int], EvalReport] = {}
    base = evaluate(split, model, grid, tolerance, lengths, seed=seed)
    reports[("none", 0)] = base
    for modality in modalities:
        for n in mask_lengths:
            if n == 0:
                reports[(modality, 0)] = base
                continue
            reports[(modality, n)] = evaluate(split, model, grid, tolerance, lengths, mask=(modality, n), seed=seed)
    return RobustnessResult(reports)


# --------------------------------------------------------------------------
# heatmaps


@dataclass
class HeatmapExport:
    maps: np.ndarray  # [layers, t_v, h, w], each frame min-max normalised
    start: int  # first clip frame covered by the visual window
    files: list[Path]


def _minmax_frames(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=(-2, -1), keepdims=True)
    hi = x.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    out = np.ones_like(x)
    np.divide(x - lo, span, out=out, where=span > 0)
    return out


def attention_maps(clip: SyntheticClip, model, length: int | None = None) -> tuple[np.ndarray, int]:
    """Cross-attention over the visual grid for the aligned pair, ``[layers, t_v, h, w]``.

    Weights are averaged over heads and audio query positions (CLS excluded)
    and min-max normalised per frame.
    """
    if getattr(model, "variant", None) != "dec":
        raise UnsupportedVariantError(f"heatmaps need the decoder variant, got {getattr(model, 'variant', None)!r}")
    d = clip.true_offset_frames
    T = length or min(model.cfg.max_frames, clip.num_frames - abs(d))
    lo, hi = max(0, -d), min(clip.num_frames - T, clip.num_frames - T - d)
    s = (lo + hi) // 2
    if T < 1 or lo > hi:
        raise ProtocolError(f"clip {clip.clip_id}: no aligned {T}-frame window for offset {d}")
    spf = clip.samples_per_frame
    frames = clip.visual.frames[None, :, s:s + T]
    audio = clip.audio.samples[None, (s + d) * spf:(s + d + T) * spf]
    model.score_pairs(frames, audio, [0], [0])
    cross = model.last_record.cross_array()  # [layers, 1, heads, 1 + t_a, t_v*h*w]
    g = model.cfg.grid_size
    maps = cross[:, 0, :, 1:, :].mean(axis=(1, 2)).reshape(cross.shape[0], T, g, g)
    return _minmax_frames(maps), s


def export_heatmaps(clip: SyntheticClip, model, out_path: str | Path, length: int | None = None,
                    png: bool = False) -> HeatmapExport:
    """Write one CSV grid per (layer, frame) and optionally a PNG per layer."""
    maps, start = attention_maps(clip, model, length)
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for layer in range(maps.shape[0]):
        for t in range(maps.shape[1]):
            path = out / f"{clip.clip_id}_layer{layer}_frame{start + t:03d}.csv"
            np.savetxt(path, maps[layer, t], delimiter=",", fmt="%.6f")
            files.append(path)
        if png:
            files.append(_write_png(maps[layer], out / f"{clip.clip_id}_layer{layer}.png"))
    return HeatmapExport(maps, start, files)


def _write_png(frames: np.ndarray, path: Path, scale: int = 16) -> Path:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ConfigError("PNG export needs Pillow (pip install avsync[png])") from exc
    strip = np.concatenate([np.kron(f, np.ones((scale, scale))) for f in frames], axis=1)
    Image.fromarray(np.uint8(np.round(255 * strip)), mode="L").save(path)
    return path


def heatmap_hits(clip: SyntheticClip, maps: np.ndarray, start: int, downsample: int) -> list[bool]:
    """For each event frame in the window: is the layer-averaged argmax cell centre inside the blob box?"""
    if clip.blob_bbox is None:
        return []
    r0, r1, c0, c1 = clip.blob_bbox
    mean = maps.mean(axis=0)
    T = mean.shape[0]
    hits = []
    for t in range(T):
        if start + t not in set(clip.event_times_frames):
            continue
        i, j = np.unravel_index(np.argmax(mean[t]), mean[t].shape)
        y, x = (i + 0.5) * downsample - 0.5, (j + 0.5) * downsample - 0.5
        hits.append(bool(r0 <= y <= r1 and c0 <= x <= c1))
    return hits


# --------------------------------------------------------------------------
# depth ablation


@dataclass
class AblationTable:
    depths: list[int]
    lengths: list[int]
    accuracy: list[list[float]]  # [depth][length]
    manifest_hashes: list[str]

    @property
    def longest_non_decreasing(self) -> bool:
        col = [row[-1] for row in self.accuracy]
        return all(b >= a for a, b in zip(col, col[1:]))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["depth"] + [f"T={t}" for t in self.lengths])
            for d, row in zip(self.depths, self.accuracy):
                writer.writerow([d] + [f"{a:.4f}" for a in row])

    def to_dict(self) -> dict:
        out = asdict(self)
        out["longest_non_decreasing"] = self.longest_non_decreasing
        return out


def run_depth_ablation(cfg, depths: Sequence[int], train_split: SplitDataset, test_split: SplitDataset,
                       out_dir: str | Path, log=None) -> AblationTable:
    """Train one model per depth with identical seed and data, evaluate each on the same test split."""
    from .model import AVSTModel
    from .training import run_curriculum

    if not depths or any(d < 1 for d in depths):
        raise ConfigError(f"depths must be >= 1, got {list(depths)}")
    out = Path(out_dir)
    grid = OffsetGrid.symmetric(cfg.eval.grid_max)
    rows, hashes = [], []
    for depth in depths:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.model.layers = int(depth)
        run_cfg.validate()
        model = AVSTModel(run_cfg.model, run_cfg.variant, seed=run_cfg.seed)
        run_curriculum(run_cfg, train_split, model, out / f"depth-{depth}", log=log)
        report = evaluate(test_split, model, grid, run_cfg.eval.tolerance, run_cfg.eval.lengths, seed=run_cfg.seed)
        report.save(out / f"depth-{depth}" / "eval_report.json")
        rows.append([report.per_length[str(t)] for t in run_cfg.eval.lengths])
        hashes.append(report.manifest_hash)
    table = AblationTable([int(d) for d in depths], list(cfg.eval.lengths), rows, hashes)
    table.write_csv(out / "depth_ablation.csv")
    (out / "depth_ablation.json").write_text(json.dumps(table.to_dict(), sort_keys=True, indent=1))
    return table


__all__ = [
    "AMBIENT", "EVIDENT", "OffsetGrid", "SyncScoreMatrix", "EvalReport", "Prediction", "score_offsets",
    "is_correct", "evaluate", "robustness_sweep", "export_heatmaps", "run_depth_ablation", "RandomScorer",
    "ConstantScorer", "chance_rate",
]
