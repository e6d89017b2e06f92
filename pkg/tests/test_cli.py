import json

import numpy as np
import pytest
from click.testing import CliRunner

from avsync.cli import main
from avsync.config import dump_config, load_config
from avsync.model import load_checkpoint, save_checkpoint

from conftest import tiny_experiment


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_experiment("enc-mp")
    dump_config(cfg, root / "tiny.toml")
    runner = CliRunner()
    res = runner.invoke(main, ["generate", "--config", str(root / "tiny.toml"), "--out", str(root / "data")])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["train", "--config", str(root / "tiny.toml"), "--out", str(root / "run"),
                               "--data", str(root / "data")])
    assert res.exit_code == 0, res.output
    return root


def test_config_roundtrip(tmp_path):
    cfg = tiny_experiment("dec")
    dump_config(cfg, tmp_path / "c.toml")
    assert load_config(tmp_path / "c.toml") == cfg


def test_end_to_end_outputs(workspace):
    root = workspace
    assert (root / "data" / "train" / "manifest.json").exists()
    assert (root / "run" / "final.ckpt").exists() and (root / "run" / "config.toml").exists()
    res = CliRunner().invoke(main, ["evaluate", "--config", str(root / "tiny.toml"), "--out", str(root / "eval"),
                                    "--data", str(root / "data"), "--checkpoint", str(root / "run" / "final.ckpt")])
    assert res.exit_code == 0, res.output
    report = json.loads((root / "eval" / "eval_report.json").read_text())
    assert set(report["per_length"]) == {"2", "4"}
    assert json.loads(res.output)["overall"] == report["overall_accuracy"]


def test_robustness_command(workspace):
    root = workspace
    res = CliRunner().invoke(main, ["robustness", "--config", str(root / "tiny.toml"), "--out", str(root / "rob"),
                                    "--data", str(root / "data"), "--checkpoint", str(root / "run" / "final.ckpt"),
                                    "--modalities", "both", "--mask-lengths", "0,1"])
    assert res.exit_code == 0, res.output
    assert (root / "rob" / "robustness.csv").exists()


def test_heatmap_command_rejects_encoder_checkpoint(workspace):
    root = workspace
    res = CliRunner().invoke(main, ["heatmap", "--config", str(root / "tiny.toml"), "--out", str(root / "hm"),
                                    "--data", str(root / "data"), "--checkpoint", str(root / "run" / "final.ckpt")])
    assert res.exit_code == 2


def test_config_error_exit_code(tmp_path):
    (tmp_path / "bad.toml").write_text('variant = "enc-xl"\n')
    res = CliRunner().invoke(main, ["generate", "--config", str(tmp_path / "bad.toml"), "--out", str(tmp_path)])
    assert res.exit_code == 2
    assert "enc-xl" in res.output


def test_data_error_exit_code(workspace, tmp_path):
    res = CliRunner().invoke(main, ["evaluate", "--config", str(workspace / "tiny.toml"), "--out", str(tmp_path),
                                    "--data", str(tmp_path / "nowhere"),
                                    "--checkpoint", str(workspace / "run" / "final.ckpt")])
    assert res.exit_code == 3
    assert "manifest" in res.output


def test_numeric_error_exit_code(workspace, tmp_path):
    model = load_checkpoint(workspace / "run" / "final.ckpt")
    model.head.fc2.bias.data[...] = np.nan
    save_checkpoint(model, tmp_path / "nan.ckpt")
    res = CliRunner().invoke(main, ["evaluate", "--config", str(workspace / "tiny.toml"), "--out", str(tmp_path),
                                    "--data", str(workspace / "data"), "--checkpoint", str(tmp_path / "nan.ckpt")])
    assert res.exit_code == 4
    assert "non-finite" in res.output
