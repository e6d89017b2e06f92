import numpy as np
import pytest
from hypothesis import given, strategies as st

from avsync import ops
from avsync.config import ModelConfig
from avsync.encoders import AudioWaveform, VisualClip
from avsync.errors import CapacityError, ConfigError, DataError, ShapeError
from avsync.gradcheck import check_model_gradients
from avsync.model import (AVSTModel, EncodingTables, ScoreHead, TransformerStack, attention_flops,
                          build_tokens_enc, build_tokens_mp, decoder_forward, encoder_forward, load_checkpoint,
                          read_checkpoint, save_checkpoint, sync_score, token_count)
from avsync.tensor import Tape, Tensor

from conftest import tiny_model_config


def _tables(c, t_v_max, t_a_max, grid, rng, zero=False):
    tab = EncodingTables(c, t_v_max, t_a_max, grid, rng)
    if zero:
        for name, p in tab.named_parameters():
            if name != "cls_token":
                p.data[...] = 0.0
    return tab


def _clip(cfg, T, rng):
    frames = rng.uniform(0, 1, (3, T, cfg.frame_size, cfg.frame_size))
    wave = 0.3 * rng.standard_normal(T * cfg.samples_per_frame)
    return VisualClip(frames, cfg.fps), AudioWaveform(wave, cfg.sample_rate)


# -- token building ------------------------------------------------------


def test_enc_token_count_paper_dims(rng):
    V = Tensor(rng.standard_normal((1, 4, 5, 14, 14)))
    A = Tensor(rng.standard_normal((1, 4, 20)))
    seq = build_tokens_enc(V, A, _tables(4, 5, 20, (14, 14), rng))
    assert seq.tokens.shape == (1, 1001, 4)
    assert seq.layout == (1, 980, 20)
    assert token_count("enc", 5, 20, 14, 14) == 1001


def test_zero_features_and_tables_leave_only_cls(rng):
    tab = _tables(6, 4, 8, (2, 2), rng, zero=True)
    seq = build_tokens_enc(Tensor(np.zeros((1, 6, 4, 2, 2))), Tensor(np.zeros((1, 6, 8))), tab)
    toks = seq.tokens.data[0]
    np.testing.assert_array_equal(toks[0], tab.cls_token.data)
    assert np.all(toks[1:] == 0)


def test_swapping_frames_permutes_token_blocks(rng):
    c, t_v, h, w = 3, 4, 2, 3
    tab = _tables(c, t_v, 8, (h, w), rng, zero=True)
    V = rng.standard_normal((1, c, t_v, h, w))
    A = Tensor(np.zeros((1, c, 8)))
    swapped = V.copy()
    swapped[:, :, [1, 3]] = V[:, :, [3, 1]]
    a = build_tokens_enc(Tensor(V), A, tab).tokens.data[0, 1:1 + t_v * h * w].reshape(t_v, h * w, c)
    b = build_tokens_enc(Tensor(swapped), A, tab).tokens.data[0, 1:1 + t_v * h * w].reshape(t_v, h * w, c)
    np.testing.assert_array_equal(b, a[[0, 3, 2, 1]])


def test_mp_token_count(rng):
    seq = build_tokens_mp(Tensor(rng.standard_normal((1, 4, 5, 3, 3))), Tensor(rng.standard_normal((1, 4, 20))),
                          _tables(4, 5, 20, None, rng))
    assert seq.tokens.shape[1] == 26
    assert seq.layout == (1, 5, 20)


def test_mp_single_activation_per_frame(rng):
    c, t_v = 4, 3
    tab = _tables(c, t_v, 4, None, rng)
    V = np.zeros((1, c, t_v, 3, 3))
    for t in range(t_v):
        V[0, t % c, t, t, (2 * t) % 3] = 10.0 + t
    seq = build_tokens_mp(Tensor(V), Tensor(np.zeros((1, c, 4))), tab)
    for t in range(t_v):
        column = V[0, :, t].reshape(c, -1).max(axis=1)
        expected = column + tab.temporal_visual.data[t] + tab.modality.data[0]
        np.testing.assert_array_equal(seq.tokens.data[0, 1 + t], expected)


def test_long_sequence_counts():
    assert token_count("enc-mp", 30, 120, 14, 14) == 151
    # 1 + 14*14*30 + 120; 5881 would leave out the audio tokens
    assert token_count("enc", 30, 120, 14, 14) == 6001


@given(st.integers(1, 30), st.integers(1, 120), st.integers(1, 14), st.integers(1, 14))
def test_token_count_formulas(t_v, t_a, h, w):
    assert token_count("enc", t_v, t_a, h, w) == 1 + h * w * t_v + t_a
    assert token_count("enc-mp", t_v, t_a, h, w) == 1 + t_v + t_a
    assert token_count("dec", t_v, t_a, h, w) == 1 + t_a


def test_capacity_error(rng):
    tab = _tables(4, 3, 12, None, rng)
    with pytest.raises(CapacityError):
        build_tokens_mp(Tensor(np.zeros((1, 4, 4, 2, 2))), Tensor(np.zeros((1, 4, 12))), tab)
    with pytest.raises(CapacityError):
        build_tokens_mp(Tensor(np.zeros((1, 4, 3, 2, 2))), Tensor(np.zeros((1, 4, 13))), tab)


def test_spatial_grid_mismatch(rng):
    with pytest.raises(ShapeError):
        build_tokens_enc(Tensor(np.zeros((1, 4, 2, 3, 3))), Tensor(np.zeros((1, 4, 4))), _tables(4, 2, 4, (2, 2), rng))


# -- transformer stacks --------------------------------------------------


def test_encoder_attention_rows_sum_to_one(rng):
    stack = TransformerStack("encoder", 2, 8, 2, 16, rng)
    _, rec = encoder_forward(Tensor(rng.standard_normal((2, 7, 8))), stack)
    for w in rec.self_attn:
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-10)


def test_encoder_residual_identity(rng):
    stack = TransformerStack("encoder", 2, 8, 2, 16, rng)
    for name, p in stack.named_parameters():
        if "norm" not in name:
            p.data[...] = 0.0
    x = rng.standard_normal((1, 5, 8))
    y, _ = encoder_forward(Tensor(x), stack)
    np.testing.assert_array_equal(y.data, x)


def test_encoder_permutation_equivariance(rng):
    stack = TransformerStack("encoder", 2, 8, 2, 16, rng)
    x = rng.standard_normal((1, 6, 8))
    perm = [0, 1, 4, 3, 2, 5]
    y, _ = encoder_forward(Tensor(x), stack)
    yp, _ = encoder_forward(Tensor(x[:, perm]), stack)
    np.testing.assert_allclose(yp.data, y.data[:, perm], atol=1e-12)


def test_decoder_cross_rows_and_output_length(rng):
    stack = TransformerStack("decoder", 2, 8, 2, 16, rng)
    q = Tensor(rng.standard_normal((1, 1 + 6, 8)))
    for n_vis in (4, 12, 40):
        y, rec = decoder_forward(Tensor(rng.standard_normal((1, n_vis, 8))), q, stack)
        assert y.shape == (1, 7, 8)
        for w in rec.cross_attn:
            assert w.shape == (1, 2, 7, n_vis)
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-10)


def test_decoder_identical_visual_tokens_collapse_values(rng):
    stack = TransformerStack("decoder", 1, 8, 2, 16, rng)
    mem = Tensor(np.tile(rng.standard_normal(8), (1, 9, 1)))
    q = Tensor(rng.standard_normal((1, 4, 8)))
    y1, _ = decoder_forward(mem, q, stack)
    stack.layers[0].cross_attn.key.weight.data[...] = rng.standard_normal((8, 8)) * 5
    y2, rec = decoder_forward(mem, q, stack)
    np.testing.assert_allclose(y1.data, y2.data, atol=1e-12)


def test_decoder_memory_index_matches_unshared(rng):
    stack = TransformerStack("decoder", 2, 8, 2, 16, rng)
    mem = rng.standard_normal((2, 5, 8))
    q = rng.standard_normal((3, 4, 8))
    idx = np.array([1, 0, 1])
    shared, _ = decoder_forward(Tensor(mem), Tensor(q), stack, memory_index=idx)
    direct, _ = decoder_forward(Tensor(mem[idx]), Tensor(q), stack)
    np.testing.assert_allclose(shared.data, direct.data, atol=1e-12)


# -- head ----------------------------------------------------------------


def test_zero_cls_zero_bias_head_scores_zero(rng):
    head = ScoreHead(8, rng)
    assert sync_score(Tensor(np.zeros((1, 3, 8))), head).data.item() == 0.0


def test_score_reads_only_cls(rng):
    head = ScoreHead(8, rng)
    Y = rng.standard_normal((1, 5, 8))
    s1 = sync_score(Tensor(Y), head).data
    Y[:, 1:] += rng.standard_normal((1, 4, 8))
    assert sync_score(Tensor(Y), head).data.tobytes() == s1.tobytes()


def test_head_matches_affine_relu_affine(rng):
    head = ScoreHead(8, rng)
    head.fc1.bias.data[...] = rng.standard_normal(8)
    head.fc2.bias.data[...] = rng.standard_normal(1)
    x = rng.standard_normal(8)
    hidden = [max(0.0, sum(x[i] * head.fc1.weight.data[i, j] for i in range(8)) + head.fc1.bias.data[j])
              for j in range(8)]
    expected = sum(hidden[j] * head.fc2.weight.data[j, 0] for j in range(8)) + head.fc2.bias.data[0]
    got = sync_score(Tensor(x.reshape(1, 1, 8)), head).data.item()
    assert abs(got - expected) < 1e-12


# -- full model ----------------------------------------------------------


def test_enc_mp_forward_smoke(rng):
    cfg = ModelConfig()
    model = AVSTModel(cfg, "enc-mp", seed=0)
    clip, wave = _clip(cfg, 5, rng)
    score, _ = model.forward(clip, wave)
    assert score.shape == () and np.isfinite(score.data)
    assert model.last_sequence_length == 1 + 5 + 20


def test_dec_record_shape(rng):
    cfg = ModelConfig()
    model = AVSTModel(cfg, "dec", seed=0)
    clip, wave = _clip(cfg, 5, rng)
    _, rec = model.forward(clip, wave)
    g = cfg.grid_size
    assert rec.cross_array()[:, 0].shape == (cfg.layers, cfg.heads, 1 + 20, g * g * 5)


@pytest.mark.parametrize("variant", ["enc", "enc-mp", "dec"])
def test_forward_deterministic(variant, rng):
    cfg = tiny_model_config()
    clip, wave = _clip(cfg, 3, rng)
    a = AVSTModel(cfg, variant, seed=4).forward(clip, wave)[0].data
    b = AVSTModel(cfg, variant, seed=4).forward(clip, wave)[0].data
    assert a.tobytes() == b.tobytes()


def test_forward_rejects_mismatched_audio(rng):
    cfg = tiny_model_config()
    clip, wave = _clip(cfg, 3, rng)
    with pytest.raises(DataError):
        AVSTModel(cfg, "enc-mp").forward(clip, AudioWaveform(wave.samples[:-10], cfg.sample_rate))


def test_unknown_variant():
    with pytest.raises(ConfigError):
        AVSTModel(tiny_model_config(), "enc-xl")


@pytest.mark.parametrize("variant", ["enc-mp", "dec"])
def test_variable_length_without_reinstantiation(variant, rng):
    cfg = ModelConfig()
    model = AVSTModel(cfg, variant, seed=0)
    for T in (2, 7, cfg.max_frames):
        clip, wave = _clip(cfg, T, rng)
        assert np.isfinite(model.forward(clip, wave)[0].data)
    clip, wave = _clip(cfg, cfg.max_frames + 1, rng)
    with pytest.raises(CapacityError):
        model.forward(clip, wave)


@pytest.mark.parametrize("variant", ["enc", "enc-mp", "dec"])
def test_every_parameter_receives_gradient(variant, rng):
    cfg = tiny_model_config(layers=2, heads=2)
    model = AVSTModel(cfg, variant, seed=1)
    frames = rng.uniform(0, 1, (2, 3, 3, 16, 16))
    audio = 0.3 * rng.standard_normal((2, 3 * cfg.samples_per_frame))
    w = rng.standard_normal((2, 2))
    with Tape() as tape:
        loss = ops.sum(ops.mul(model.score_matrix(frames, audio), w))
    tape.backward(loss)
    for name, p in model.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name


def test_score_matrix_counts_pairs(rng):
    cfg = tiny_model_config()
    model = AVSTModel(cfg, "enc-mp")
    model.score_matrix(rng.uniform(0, 1, (3, 3, 2, 16, 16)), rng.standard_normal((3, 2 * cfg.samples_per_frame)))
    assert model.pair_evaluations == 9


def test_tiny_model_gradient_check(rng):
    cfg = tiny_model_config()
    model = AVSTModel(cfg, "enc-mp", seed=0)
    frames = rng.uniform(0, 1, (2, 3, 2, 16, 16))
    audio = 0.3 * rng.standard_normal((2, 2 * cfg.samples_per_frame))
    w = rng.standard_normal((2, 2))
    worst, n = check_model_gradients(model.parameters(),
                                     lambda: ops.sum(ops.mul(model.score_matrix(frames, audio), w)), 200, rng)
    assert n == 200
    assert worst < 1e-3


def test_attention_flops_linear_in_memory_quadratic_in_sequence():
    assert attention_flops(10, 8, 2) == 2 * (2 * 100 * 8)
    assert attention_flops(10, 8, 1, mem_len=50) == 2 * 100 * 8 + 2 * 10 * 50 * 8


# -- checkpoints ---------------------------------------------------------


@pytest.mark.parametrize("variant", ["enc", "enc-mp", "dec"])
def test_checkpoint_roundtrip(variant, tmp_path, rng):
    cfg = tiny_model_config()
    model = AVSTModel(cfg, variant, seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, {"note": 1})
    manifest, state = read_checkpoint(path)
    assert manifest["variant"] == variant and manifest["extra"] == {"note": 1}
    loaded = load_checkpoint(path)
    clip, wave = _clip(cfg, 2, rng)
    assert model.forward(clip, wave)[0].data.tobytes() == loaded.forward(clip, wave)[0].data.tobytes()
    assert model.fingerprint() == loaded.fingerprint()


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(AVSTModel(tiny_model_config(), "enc-mp"), path)
    path.write_bytes(path.read_bytes()[:-64])
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "absent.ckpt")
