import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from avsync.errors import ConfigError, ProtocolError, UnsupportedVariantError
from avsync.evaluation import (AblationTable, ConstantScorer, EvalReport, OffsetGrid, RandomScorer, chance_rate,
                               evaluate, export_heatmaps, is_correct, pick_offset, robustness_sweep,
                               run_depth_ablation, score_offsets)
from avsync.model import AVSTModel
from avsync.synthdata import SplitDataset, default_classes, generate_clip

from conftest import tiny_experiment, write_tiny_dataset


class NegAbsOffset:
    """Scores each grid offset by -|offset|."""

    def score_windows(self, frames, windows):
        G = windows.shape[0]
        return -np.abs(np.arange(G) - G // 2).astype(float)

    def fingerprint(self):
        return "neg-abs"


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    cfg = tiny_experiment("dec")
    root = tmp_path_factory.mktemp("tiny")
    write_tiny_dataset(cfg, root)
    return cfg, SplitDataset.open(root / "train"), SplitDataset.open(root / "test")


def _long_clip(offset=0, frames=45):
    return generate_clip(default_classes()[0], frames, 5.0, 16000, offset, np.random.default_rng(0))


# -- grid and scoring ----------------------------------------------------


def test_default_grid_has_31_offsets():
    g = OffsetGrid.symmetric()
    assert len(g) == 31 and 0 in g.offsets and g.offsets == tuple(-d for d in reversed(g.offsets))


def test_grid_must_be_symmetric():
    with pytest.raises(ConfigError):
        OffsetGrid((-1, 0, 2))


def test_score_offsets_gives_one_score_per_offset():
    m = score_offsets(_long_clip(), RandomScorer(0), OffsetGrid.symmetric(15), 15)
    assert m.scores.shape == (31,)
    assert m.predicted_offset in m.offsets


def test_negative_abs_offset_stub_predicts_zero():
    assert score_offsets(_long_clip(7), NegAbsOffset(), OffsetGrid.symmetric(15), 5).predicted_offset == 0


def test_windows_pair_visual_with_shifted_audio():
    clip = _long_clip()
    seen = {}

    class Probe(ConstantScorer):
        def score_windows(self, frames, windows):
            seen["frames"], seen["windows"] = frames, windows
            return super().score_windows(frames, windows)

    score_offsets(clip, Probe(), OffsetGrid.symmetric(15), 5)
    s = (45 - 5) // 2
    np.testing.assert_array_equal(seen["frames"], clip.visual.frames[:, s:s + 5])
    for i, d in enumerate(range(-15, 16)):
        np.testing.assert_array_equal(seen["windows"][i], clip.audio.samples[(s + d) * 3200:(s + d + 5) * 3200])


def test_short_clip_is_protocol_error_naming_length():
    with pytest.raises(ProtocolError, match="at least 45"):
        score_offsets(_long_clip(frames=40), RandomScorer(0), OffsetGrid.symmetric(15), 15)


def test_tie_break_prefers_small_then_negative():
    assert pick_offset(np.array([1.0, 1.0, 0.0, 1.0, 1.0]), (-2, -1, 0, 1, 2)) == -1
    assert pick_offset(np.zeros(5), (-2, -1, 0, 1, 2)) == 0


def test_is_correct_examples():
    assert is_correct(-4, 0, 5)
    assert not is_correct(2, 0, 1)
    assert is_correct(3, 3, 0)
    with pytest.raises(ConfigError):
        is_correct(0, 0, -1)


@given(st.lists(st.tuples(st.integers(-15, 15), st.integers(-15, 15)), min_size=1, max_size=50),
       st.integers(0, 30))
def test_accuracy_monotone_in_tolerance(pairs, tol):
    acc = [np.mean([is_correct(p, t, k) for p, t in pairs]) for k in (tol, tol + 1)]
    assert acc[0] <= acc[1]


def test_chance_rates():
    g = OffsetGrid.symmetric(15)
    assert chance_rate(g, 5) == 11 / 31 and chance_rate(g, 1) == 3 / 31
    assert chance_rate(g, 5, range(-15, 16)) == pytest.approx(311 / 961)
    assert chance_rate(g, 1, range(-15, 16)) == pytest.approx(91 / 961)


# -- reports -------------------------------------------------------------


def test_constant_scorer_accuracy_equals_small_offset_fraction(tiny_data):
    cfg, _, test = tiny_data
    grid = OffsetGrid.symmetric(2)
    report = evaluate(test, ConstantScorer(), grid, 1, [2, 4])
    truth = [test.entry(i)["true_offset"] for i in range(len(test))]
    assert report.overall_accuracy == np.mean([abs(t) <= 1 for t in truth])
    assert all(p.predicted == 0 for p in report.predictions)


def test_report_partitions(tiny_data):
    _, _, test = tiny_data
    report = evaluate(test, RandomScorer(1), OffsetGrid.symmetric(2), 1, [2, 4])
    assert sum(report.per_class_counts.values()) == report.clip_count == len(test)
    assert len(report.predictions) == 2 * len(test)
    for acc in [report.overall_accuracy, *report.per_class.values(), *report.per_length.values()]:
        assert 0.0 <= acc <= 1.0


def test_report_json_roundtrip(tiny_data, tmp_path):
    _, _, test = tiny_data
    report = evaluate(test, RandomScorer(2), OffsetGrid.symmetric(2), 1, [2, 4])
    report.save(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back.to_json() == report.to_json()
    assert back.at_tolerance(2).overall_accuracy >= back.overall_accuracy


def test_evaluate_is_deterministic(tiny_data):
    cfg, _, test = tiny_data
    model = AVSTModel(cfg.model, "enc-mp", seed=0)
    a = evaluate(test, model, OffsetGrid.symmetric(2), 1, [2, 4]).to_json()
    b = evaluate(test, model, OffsetGrid.symmetric(2), 1, [2, 4]).to_json()
    assert a == b


def test_evaluate_validates_settings(tiny_data):
    _, _, test = tiny_data
    with pytest.raises(ConfigError):
        evaluate(test, ConstantScorer(), OffsetGrid.symmetric(2), -1, [2])
    with pytest.raises(ConfigError):
        evaluate(test, ConstantScorer(), OffsetGrid.symmetric(2), 1, [])


# -- robustness ----------------------------------------------------------


def test_mask_zero_reproduces_unmasked_report(tiny_data):
    cfg, _, test = tiny_data
    model = AVSTModel(cfg.model, "enc-mp", seed=0)
    grid = OffsetGrid.symmetric(2)
    result = robustness_sweep(test, model, ["both"], [0, 1], grid, 1, [2, 4])
    plain = evaluate(test, model, grid, 1, [2, 4])
    assert result.reports[("both", 0)].to_json() == plain.to_json()
    assert result.reports[("both", 1)].mask == {"modality": "both", "frames": 1}
    assert len(result.table()) == 3 * 2


def test_mask_length_must_fit(tiny_data):
    _, _, test = tiny_data
    with pytest.raises(ConfigError):
        robustness_sweep(test, ConstantScorer(), ["audio"], [2], OffsetGrid.symmetric(2), 1, [2, 4])


# -- heatmaps ------------------------------------------------------------


def test_heatmaps_need_decoder(tiny_data, tmp_path):
    cfg, _, test = tiny_data
    with pytest.raises(UnsupportedVariantError):
        export_heatmaps(test[0], AVSTModel(cfg.model, "enc-mp"), tmp_path)


def test_heatmap_csv_grids(tiny_data, tmp_path):
    cfg, _, test = tiny_data
    model = AVSTModel(cfg.model, "dec", seed=0)
    export = export_heatmaps(test[0], model, tmp_path, length=3, png=True)
    g = cfg.model.grid_size
    csvs = [p for p in export.files if p.suffix == ".csv"]
    assert len(csvs) == cfg.model.layers * 3
    for path in csvs:
        grid = np.loadtxt(path, delimiter=",", ndmin=2)
        assert grid.shape == (g, g)
        assert grid.min() >= 0.0 and grid.max() == 1.0
    assert any(p.suffix == ".png" for p in export.files)


# -- depth ablation ------------------------------------------------------


def test_ablation_table_shape(tiny_data, tmp_path):
    cfg, train, test = tiny_data
    cfg = tiny_experiment("enc-mp", epochs=2, steps_per_epoch=1)
    table = run_depth_ablation(cfg, [1, 2], train, test, tmp_path)
    assert table.depths == [1, 2]
    assert len(table.accuracy) == 2 and all(len(row) == len(cfg.eval.lengths) for row in table.accuracy)
    assert len(set(table.manifest_hashes)) == 1
    rows = list(csv.reader(open(tmp_path / "depth_ablation.csv")))
    assert len(rows) == 3 and len(rows[0]) == 1 + len(cfg.eval.lengths)
    assert json.loads((tmp_path / "depth_ablation.json").read_text())["depths"] == [1, 2]


def test_ablation_flag():
    assert AblationTable([1, 2, 3], [5, 15], [[0.1, 0.5], [0.2, 0.6], [0.3, 0.6]], ["h"] * 3).longest_non_decreasing
    assert not AblationTable([1, 2], [5], [[0.5], [0.4]], ["h"] * 2).longest_non_decreasing
    with pytest.raises(ConfigError):
        run_depth_ablation(tiny_experiment(), [0], None, None, ".")
