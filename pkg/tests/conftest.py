import numpy as np
import pytest
from hypothesis import settings

from avsync.config import ModelConfig

settings.register_profile("avsync", deadline=None, max_examples=40)
settings.load_profile("avsync")


def tiny_model_config(**overrides) -> ModelConfig:
    """Small enough for finite-difference sweeps: 16x16 frames, 2x2 grid, c=8."""
    base = dict(channels=8, visual_widths=[2, 2, 2], temporal_kernel=3, audio_hidden=4,
                audio_steps_per_frame=2, layers=1, heads=1, ffn_dim=16, max_frames=4,
                frame_size=16, fps=5.0, sample_rate=16000)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


def tiny_experiment(variant: str = "enc-mp", **train):
    """ExperimentConfig paired with tiny_model_config and a 16x16, 12-frame data geometry."""
    from avsync.config import DataConfig, EvalConfig, ExperimentConfig, TrainConfig

    data = DataConfig(n_evident=3, n_ambient=1, n_train=8, n_test=4, frame_size=16, span_frames=12,
                      max_test_offset=2)
    tc = dict(epochs=2, steps_per_epoch=2, batch_size={"enc": 2, "enc-mp": 3, "dec": 3},
              min_frames=2, max_frames=4, max_offset=2)
    tc.update(train)
    cfg = ExperimentConfig(seed=5, variant=variant, data=data, model=tiny_model_config(),
                           train=TrainConfig(**tc), eval=EvalConfig(grid_max=2, tolerance=1, lengths=[2, 4]))
    return cfg.validate()


def write_tiny_dataset(cfg, out):
    from avsync.synthdata import default_classes, generate_dataset

    d = cfg.data
    return generate_dataset(default_classes(d.n_evident, d.n_ambient, d.frame_size), d.n_train, d.n_test,
                            cfg.seed, out, num_frames=d.span_frames, fps=d.fps, sample_rate=d.sample_rate,
                            frame_size=d.frame_size, max_offset=d.max_test_offset)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
