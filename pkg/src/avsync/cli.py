"""Command line entry point: generate, train, evaluate, robustness, ablate, heatmap."""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from .config import ExperimentConfig, dump_config, load_config
from .errors import ConfigError, DataError, NumericError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _guard(fn):
    """Map library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)

    return wrapper


def _int_list(value: str | None) -> list[int] | None:
    if value is None:
        return None
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {value!r}") from exc


def _resolve(config: str | None, seed: int | None, variant: str | None = None, tolerance: int | None = None,
             grid_max: int | None = None, lengths: str | None = None) -> ExperimentConfig:
    cfg = load_config(config)
    if seed is not None:
        cfg.seed = seed
    if variant is not None:
        cfg.variant = variant
    if tolerance is not None:
        cfg.eval.tolerance = tolerance
    if grid_max is not None:
        cfg.eval.grid_max = grid_max
    if lengths is not None:
        cfg.eval.lengths = _int_list(lengths)
    return cfg.validate()


def _open_splits(data: str):
    from .synthdata import SplitDataset

    root = Path(data)
    return SplitDataset.open(root / "train"), SplitDataset.open(root / "test")


def _load_model(checkpoint: str):
    from .model import load_checkpoint

    return load_checkpoint(checkpoint)


config_opt = click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
                          help="TOML experiment config.")
seed_opt = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None, help="Overrides the config seed.")
out_opt = click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
data_opt = click.option("--data", required=True, type=click.Path(file_okay=False),
                        help="Dataset root holding train/ and test/.")
ckpt_opt = click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
eval_opts = [
    click.option("--tolerance", type=click.IntRange(0), default=None, help="Tolerance in frames."),
    click.option("--grid-max", type=click.IntRange(0), default=None, help="Offsets span [-g, g]."),
    click.option("--lengths", default=None, help="Comma-separated clip lengths in frames."),
]


def _with(options):
    def deco(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return deco


@click.group()
def main():
    """Audio-visual synchronisation with transformers, at desk scale."""


@main.command()
@config_opt
@seed_opt
@out_opt
@_guard
def generate(config, seed, out):
    """Write the synthetic train/test splits."""
    from .synthdata import default_classes, generate_dataset

    cfg = _resolve(config, seed)
    d = cfg.data
    out = Path(out)
    generate_dataset(default_classes(d.n_evident, d.n_ambient, d.frame_size), d.n_train, d.n_test, cfg.seed, out,
                     num_frames=d.span_frames, fps=d.fps, sample_rate=d.sample_rate, frame_size=d.frame_size,
                     max_offset=d.max_test_offset, visual_noise=d.visual_noise, audio_noise=d.audio_noise)
    dump_config(cfg, out / "config.toml")
    click.echo(f"wrote {d.n_train} train and {d.n_test} test clips to {out}")


@main.command()
@config_opt
@seed_opt
@out_opt
@data_opt
@click.option("--variant", type=click.Choice(["enc", "enc-mp", "dec"]), default=None)
@_guard
def train(config, seed, out, data, variant):
    """Run the two-stage curriculum and write checkpoints."""
    from .model import AVSTModel
    from .training import run_curriculum

    cfg = _resolve(config, seed, variant)
    train_split, _ = _open_splits(data)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.toml")
    model = AVSTModel(cfg.model, cfg.variant, seed=cfg.seed)
    result = run_curriculum(cfg, train_split, model, out)
    click.echo(f"{result.steps} steps, final loss {result.losses[-1]:.4f}, checkpoint {result.checkpoint}")


@main.command()
@config_opt
@seed_opt
@out_opt
@data_opt
@ckpt_opt
@_with(eval_opts)
@_guard
def evaluate(config, seed, out, data, checkpoint, tolerance, grid_max, lengths):
    """Dense offset-grid evaluation of a checkpoint on the test split."""
    from .evaluation import OffsetGrid, evaluate as run_eval

    cfg = _resolve(config, seed, None, tolerance, grid_max, lengths)
    _, test = _open_splits(data)
    model = _load_model(checkpoint)
    report = run_eval(test, model, OffsetGrid.symmetric(cfg.eval.grid_max), cfg.eval.tolerance, cfg.eval.lengths,
                      seed=cfg.seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "eval_report.json")
    dump_config(cfg, out / "config.toml")
    click.echo(json.dumps({"overall": report.overall_accuracy, "per_length": report.per_length}, sort_keys=True))


@main.command()
@config_opt
@seed_opt
@out_opt
@data_opt
@ckpt_opt
@_with(eval_opts)
@click.option("--modalities", default="audio,visual,both", help="Comma-separated subset of audio,visual,both.")
@click.option("--mask-lengths", default="0,1", help="Comma-separated mask lengths in frames.")
@_guard
def robustness(config, seed, out, data, checkpoint, tolerance, grid_max, lengths, modalities, mask_lengths):
    """Accuracy under zeroed frame spans, per modality and mask length."""
    from .evaluation import OffsetGrid, robustness_sweep

    cfg = _resolve(config, seed, None, tolerance, grid_max, lengths)
    mods = [m.strip() for m in modalities.split(",") if m.strip()]
    bad = [m for m in mods if m not in ("audio", "visual", "both")]
    if bad:
        raise ConfigError(f"unknown modalities {bad}")
    _, test = _open_splits(data)
    model = _load_model(checkpoint)
    result = robustness_sweep(test, model, mods, _int_list(mask_lengths), OffsetGrid.symmetric(cfg.eval.grid_max),
                              cfg.eval.tolerance, cfg.eval.lengths, seed=cfg.seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "robustness.csv")
    for (mod, n), rep in result.reports.items():
        rep.save(out / f"eval_{mod}_{n}.json")
    dump_config(cfg, out / "config.toml")
    click.echo(f"wrote {len(result.reports)} reports to {out}")


@main.command()
@config_opt
@seed_opt
@out_opt
@data_opt
@click.option("--variant", type=click.Choice(["enc", "enc-mp", "dec"]), default=None)
@click.option("--depths", default="1,2,3", help="Comma-separated transformer depths.")
@_with(eval_opts)
@_guard
def ablate(config, seed, out, data, variant, depths, tolerance, grid_max, lengths):
    """Train and evaluate one model per transformer depth."""
    from .evaluation import run_depth_ablation

    cfg = _resolve(config, seed, variant, tolerance, grid_max, lengths)
    train_split, test = _open_splits(data)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.toml")
    table = run_depth_ablation(cfg, _int_list(depths), train_split, test, out)
    click.echo(f"depths {table.depths}: longest-length accuracy non-decreasing = {table.longest_non_decreasing}")


@main.command()
@config_opt
@seed_opt
@out_opt
@data_opt
@ckpt_opt
@click.option("--clip-id", "clip_ids", multiple=True, help="Test clip to render (repeatable).")
@click.option("--count", type=click.IntRange(1), default=5, help="Evident clips to render when no --clip-id.")
@click.option("--png/--no-png", default=False, help="Also write PNG strips (needs Pillow).")
@_guard
def heatmap(config, seed, out, data, checkpoint, clip_ids, count, png):
    """Export decoder cross-attention heatmaps for test clips."""
    from .evaluation import export_heatmaps
    from .synthdata import EVIDENT, read_clip

    cfg = _resolve(config, seed)
    _, test = _open_splits(data)
    model = _load_model(checkpoint)
    if not clip_ids:
        clip_ids = [test.entry(i)["clip_id"] for i in range(len(test))
                    if test.entry(i)["category"] == EVIDENT][:count]
    out = Path(out)
    n = 0
    for cid in clip_ids:
        n += len(export_heatmaps(read_clip(test.root, cid), model, out, png=png).files)
    dump_config(cfg, out / "config.toml")
    click.echo(f"wrote {n} heatmap files to {out}")


if __name__ == "__main__":  # pragma: no cover
    main()
