"""AVST synchronisation transformers: token building, stacks, head, checkpoints.

Three variants share the same encoders, encoding tables and score head:

``enc``
    CLS + every spatio-temporal visual feature + audio features, full
    self-attention (sequence length ``1 + h*w*t_v + t_a``).
``enc-mp``
    visual features are max-pooled over space first (length ``1 + t_v + t_a``).
``dec``
    CLS + audio tokens form the query stream; the dense visual tokens are
    fixed keys/values for the cross-attention of every decoder layer.

Token tensors are row-major ``[batch, length, channels]``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import ops
from .config import VARIANTS, ModelConfig
from .encoders import AudioEncoder, AudioWaveform, VisualClip, VisualEncoder, audio_frontend
from .errors import CapacityError, ConfigError, DataError, ShapeError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor

CHECKPOINT_FORMAT = "avsync-checkpoint"
CHECKPOINT_VERSION = 1


def token_count(variant: str, t_v: int, t_a: int, h: int, w: int) -> int:
    """Length of the sequence fed to the transformer (queries only for ``dec``)."""
    if variant == "enc":
        return 1 + h * w * t_v + t_a
    if variant == "enc-mp":
        return 1 + t_v + t_a
    if variant == "dec":
        return 1 + t_a
    raise ConfigError(f"unknown variant {variant!r}")


def attention_flops(seq_len: int, channels: int, layers: int, mem_len: int | None = None) -> int:
    """Multiply-adds of the attention score and mixing products, all layers.

    ``QK^T`` and ``softmax(.)V`` each cost ``L_q * L_k * c``; for the decoder
    the query self-attention is added to the cross-attention over
    ``mem_len`` visual tokens.
    """
    per_layer = 2 * seq_len * seq_len * channels
    if mem_len is not None:
        per_layer += 2 * seq_len * mem_len * channels
    return layers * per_layer


class TokenLayout(NamedTuple):
    cls_count: int
    visual_count: int
    audio_count: int

    @property
    def length(self) -> int:
        return self.cls_count + self.visual_count + self.audio_count


@dataclass
class TokenSequence:
    tokens: Tensor  # [B, L, c]
    layout: TokenLayout


@dataclass
class AttentionRecord:
    """Attention weights of the last forward, one entry per layer.

    ``self_attn[l]`` is ``[B, heads, L_q, L_q]``; ``cross_attn[l]`` (decoder
    only) is ``[B, heads, 1 + t_a, h*w*t_v]``.
    """

    self_attn: list[np.ndarray] = field(default_factory=list)
    cross_attn: list[np.ndarray] = field(default_factory=list)

    def cross_array(self) -> np.ndarray:
        """``[layers, B, heads, L_q, L_v]``."""
        return np.stack(self.cross_attn)


def sinusoid_table(positions: np.ndarray, channels: int) -> np.ndarray:
    """``[len(positions), channels]``: sines in the first half, cosines in the second."""
    freqs = 10.0 ** (-2.0 * np.arange(channels // 2) / channels)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs
    table = np.zeros((len(angles), channels))
    table[:, :channels // 2] = np.sin(angles)
    table[:, channels // 2:2 * (channels // 2)] = np.cos(angles)
    return table


class EncodingTables(Module):
    """Learned CLS token and modality / temporal / spatial encodings."""

    def __init__(self, channels: int, max_frames: int, max_audio: int, grid: tuple[int, int] | None,
                 rng: np.random.Generator, temporal_init: str = "normal", audio_steps_per_frame: int = 1):
        std = 0.02
        self.cls_token = Tensor(rng.normal(0, std, channels), requires_grad=True)
        self.modality = Tensor(rng.normal(0, std, (2, channels)), requires_grad=True)
        self.temporal_visual = Tensor(rng.normal(0, std, (max_frames, channels)), requires_grad=True)
        self.temporal_audio = Tensor(rng.normal(0, std, (max_audio, channels)), requires_grad=True)
        if grid is not None:
            self.spatial = Tensor(rng.normal(0, std, (grid[0], grid[1], channels)), requires_grad=True)
        else:
            self.spatial = None
        if temporal_init == "sinusoidal":
            # both streams read the same code at the same clip time, so alignment starts out visible
            self.temporal_visual.data[...] = sinusoid_table(np.arange(max_frames) + 0.5, channels)
            self.temporal_audio.data[...] = sinusoid_table(
                (np.arange(max_audio) + 0.5) / audio_steps_per_frame, channels)
        elif temporal_init != "normal":
            raise ConfigError(f"temporal_init must be 'normal' or 'sinusoidal', got {temporal_init!r}")

    @property
    def max_frames(self) -> int:
        return self.temporal_visual.shape[0]

    @property
    def max_audio(self) -> int:
        return self.temporal_audio.shape[0]

    def check_capacity(self, t_v: int | None = None, t_a: int | None = None) -> None:
        if t_v is not None and t_v > self.max_frames:
            raise CapacityError(f"{t_v} visual steps exceed table capacity {self.max_frames}")
        if t_a is not None and t_a > self.max_audio:
            raise CapacityError(f"{t_a} audio steps exceed table capacity {self.max_audio}")


def dense_visual_tokens(V: Tensor, tables: EncodingTables) -> Tensor:
    """``[B, c, t_v, h, w]`` -> ``[B, t_v*h*w, c]`` with modality, temporal and spatial encodings."""
    B, c, t_v, h, w = V.shape
    tables.check_capacity(t_v=t_v)
    if tables.spatial is None or tables.spatial.shape[:2] != (h, w):
        got = None if tables.spatial is None else tables.spatial.shape[:2]
        raise ShapeError(f"spatial encoding grid {got} does not match feature grid {(h, w)}")
    x = ops.transpose(V, (0, 2, 3, 4, 1))  # [B, t_v, h, w, c]
    enc = ops.add(
        ops.add(ops.reshape(tables.temporal_visual[:t_v], (t_v, 1, 1, c)), tables.spatial),
        tables.modality[0])
    return ops.reshape(ops.add(x, enc), (B, t_v * h * w, c))


def pooled_visual_tokens(V: Tensor, tables: EncodingTables) -> Tensor:
    """``[B, c, t_v, h, w]`` -> ``[B, t_v, c]``: spatial max, plus modality and temporal encodings.

    No spatial encoding is added: the pooled token has no spatial position.
    """
    B, c, t_v, h, w = V.shape
    tables.check_capacity(t_v=t_v)
    pooled = ops.transpose(ops.global_max_pool_spatial(V), (0, 2, 1))  # [B, t_v, c]
    return ops.add(pooled, ops.add(tables.temporal_visual[:t_v], tables.modality[0]))


def audio_tokens(A: Tensor, tables: EncodingTables) -> Tensor:
    """``[B, c, t_a]`` -> ``[B, t_a, c]`` with modality and temporal encodings."""
    t_a = A.shape[2]
    tables.check_capacity(t_a=t_a)
    return ops.add(ops.transpose(A, (0, 2, 1)), ops.add(tables.temporal_audio[:t_a], tables.modality[1]))


def _cls_rows(tables: EncodingTables, batch: int) -> Tensor:
    c = tables.cls_token.shape[0]
    return ops.broadcast_to(ops.reshape(tables.cls_token, (1, 1, c)), (batch, 1, c))


def build_tokens_enc(V: Tensor, A: Tensor, tables: EncodingTables) -> TokenSequence:
    """Tokens for the dense encoder: ``[CLS; flatten(V) + E; A + E]``."""
    vt = dense_visual_tokens(V, tables)
    at = audio_tokens(A, tables)
    toks = ops.concat([_cls_rows(tables, V.shape[0]), vt, at], axis=1)
    return TokenSequence(toks, TokenLayout(1, vt.shape[1], at.shape[1]))


def build_tokens_mp(V: Tensor, A: Tensor, tables: EncodingTables) -> TokenSequence:
    """Tokens for the max-pooled encoder: ``[CLS; GMP(V) + E; A + E]``."""
    vt = pooled_visual_tokens(V, tables)
    at = audio_tokens(A, tables)
    toks = ops.concat([_cls_rows(tables, V.shape[0]), vt, at], axis=1)
    return TokenSequence(toks, TokenLayout(1, vt.shape[1], at.shape[1]))


class MultiHeadAttention(Module):
    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        if channels % heads:
            raise ConfigError(f"channels ({channels}) must be divisible by heads ({heads})")
        self.heads = heads
        self.query = Linear(channels, channels, rng)
        self.key = Linear(channels, channels, rng)
        self.value = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, L, c = x.shape
        return ops.transpose(ops.reshape(x, (B, L, self.heads, c // self.heads)), (0, 2, 1, 3))

    def project_memory(self, mem: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.key(mem)), self._split(self.value(mem))

    def __call__(self, x: Tensor, memory: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, np.ndarray]:
        """Attend from ``x`` to itself, or to pre-projected ``(keys, values)``."""
        B, L, c = x.shape
        d = c // self.heads
        q = self._split(ops.mul(self.query(x), 1.0 / np.sqrt(d)))
        if memory is None:
            k, v = self._split(self.key(x)), self._split(self.value(x))
        else:
            k, v = memory
        weights = ops.softmax(ops.matmul(q, ops.swapaxes(k, -1, -2)), axis=-1)
        mixed = ops.matmul(weights, v)  # [B, H, L, d]
        merged = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (B, L, c))
        return self.out(merged), weights.data


class FeedForward(Module):
    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(channels, hidden, rng, kaiming=True)
        self.fc2 = Linear(hidden, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm: ``x + MSA(LN(x))`` then ``x + FFN(LN(x))``."""

    def __init__(self, channels: int, heads: int, hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, heads, rng)
        self.norm2 = LayerNorm(channels)
        self.ffn = FeedForward(channels, hidden, rng)

    def __call__(self, x: Tensor, record: AttentionRecord) -> Tensor:
        a, w = self.attn(self.norm1(x))
        record.self_attn.append(w)
        x = ops.add(x, a)
        return ops.add(x, self.ffn(self.norm2(x)))


class DecoderLayer(Module):
    """Pre-norm: query self-attention, cross-attention to fixed visual tokens, FFN."""

    def __init__(self, channels: int, heads: int, hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(channels)
        self.self_attn = MultiHeadAttention(channels, heads, rng)
        self.norm2 = LayerNorm(channels)
        self.norm_memory = LayerNorm(channels)
        self.cross_attn = MultiHeadAttention(channels, heads, rng)
        self.norm3 = LayerNorm(channels)
        self.ffn = FeedForward(channels, hidden, rng)

    def __call__(self, q: Tensor, memory: Tensor, record: AttentionRecord,
                 memory_index: np.ndarray | None = None) -> Tensor:
        a, w = self.self_attn(self.norm1(q))
        record.self_attn.append(w)
        q = ops.add(q, a)
        keys, values = self.cross_attn.project_memory(self.norm_memory(memory))
        if memory_index is not None:
            keys, values = ops.take(keys, memory_index, axis=0), ops.take(values, memory_index, axis=0)
        a, w = self.cross_attn(self.norm2(q), memory=(keys, values))
        record.cross_attn.append(w)
        q = ops.add(q, a)
        return ops.add(q, self.ffn(self.norm3(q)))


class TransformerStack(Module):
    def __init__(self, kind: str, layers: int, channels: int, heads: int, hidden: int,
                 rng: np.random.Generator):
        if kind not in ("encoder", "decoder"):
            raise ConfigError(f"unknown stack kind {kind!r}")
        self.kind = kind
        layer_cls = EncoderLayer if kind == "encoder" else DecoderLayer
        self.layers = [layer_cls(channels, heads, hidden, rng) for _ in range(layers)]

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def encoder_forward(tokens: TokenSequence | Tensor, stack: TransformerStack) -> tuple[Tensor, AttentionRecord]:
    x = tokens.tokens if isinstance(tokens, TokenSequence) else tokens
    record = AttentionRecord()
    for layer in stack.layers:
        x = layer(x, record)
    return x, record


def decoder_forward(visual_tokens: Tensor, queries: TokenSequence | Tensor, stack: TransformerStack,
                    memory_index: np.ndarray | None = None) -> tuple[Tensor, AttentionRecord]:
    """Run the decoder stack; the same ``visual_tokens`` feed every layer.

    ``memory_index`` maps each query row to its row of ``visual_tokens``;
    keys/values are then projected once per distinct visual clip.
    """
    q = queries.tokens if isinstance(queries, TokenSequence) else queries
    record = AttentionRecord()
    for layer in stack.layers:
        q = layer(q, visual_tokens, record, memory_index)
    return q, record


class ScoreHead(Module):
    """Two-layer MLP ``c -> c -> 1`` with ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.fc1 = Linear(channels, channels, rng, kaiming=True)
        self.fc2 = Linear(channels, 1, rng)

    def __call__(self, cls_out: Tensor) -> Tensor:
        return ops.reshape(self.fc2(ops.relu(self.fc1(cls_out))), cls_out.shape[:-1])


def sync_score(Y: Tensor, head: ScoreHead) -> Tensor:
    """Score from the first (CLS) output token of ``Y [..., L, c]``."""
    if Y.shape[-2] < 1:
        raise ShapeError("sync_score needs at least one output token")
    return head(Y[..., 0, :])


class AVSTModel(Module):
    """Encoders + token builder + transformer stack + score head for one variant."""

    def __init__(self, cfg: ModelConfig, variant: str = "enc-mp", seed: int = 0):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        cfg.validate()
        self.cfg = cfg
        self.variant = variant
        rng = np.random.default_rng(seed)
        self.visual = VisualEncoder(cfg, rng)
        self.audio = AudioEncoder(cfg, rng)
        g = cfg.grid_size
        self.tables = EncodingTables(cfg.channels, cfg.max_frames, cfg.max_audio_steps,
                                     None if variant == "enc-mp" else (g, g), rng,
                                     temporal_init=cfg.temporal_init, audio_steps_per_frame=cfg.audio_steps_per_frame)
        kind = "decoder" if variant == "dec" else "encoder"
        self.stack = TransformerStack(kind, cfg.layers, cfg.channels, cfg.heads, cfg.ffn_dim, rng)
        self.head = ScoreHead(cfg.channels, rng)
        self.pair_evaluations = 0
        self.last_sequence_length = 0
        self.last_record = AttentionRecord()

    def named_parameters(self):
        for prefix in ("visual", "audio", "tables", "stack", "head"):
            for name, p in getattr(self, prefix).named_parameters():
                yield f"{prefix}.{name}", p

    # -- features ---------------------------------------------------------
    def encode_frames(self, frames: np.ndarray) -> Tensor:
        """``[B, 3, T, H, W]`` -> ``[B, c, T, h, w]``."""
        return self.visual(frames)

    def encode_waveforms(self, samples: np.ndarray) -> Tensor:
        """``[B, N]`` waveforms -> ``[B, c, t_a]``."""
        return self.audio(audio_frontend(samples, self.cfg))

    def visual_tokens(self, V: Tensor) -> Tensor:
        if self.variant == "enc-mp":
            return pooled_visual_tokens(V, self.tables)
        return dense_visual_tokens(V, self.tables)

    # -- joint scoring ----------------------------------------------------
    def score_tokens(self, vis_tokens: Tensor, aud_tokens: Tensor, vi, aj) -> Tensor:
        """Score pairs ``(vis_tokens[vi[p]], aud_tokens[aj[p]])`` -> ``[P]``.

        Each pair is a separate transformer sequence; only per-modality work
        is shared between pairs.
        """
        vi = np.asarray(vi, dtype=np.intp)
        aj = np.asarray(aj, dtype=np.intp)
        P = len(vi)
        a = ops.take(aud_tokens, aj, axis=0)
        cls = _cls_rows(self.tables, P)
        if self.variant == "dec":
            queries = ops.concat([cls, a], axis=1)
            Y, record = decoder_forward(vis_tokens, queries, self.stack, memory_index=vi)
        else:
            v = ops.take(vis_tokens, vi, axis=0)
            Y, record = encoder_forward(ops.concat([cls, v, a], axis=1), self.stack)
        self.pair_evaluations += P
        self.last_sequence_length = Y.shape[1]
        self.last_record = record
        return sync_score(Y, self.head)

    def score_pairs(self, frames: np.ndarray, samples: np.ndarray, vi, aj) -> Tensor:
        """Encode each clip once, then score the requested (visual, audio) pairs."""
        vt = self.visual_tokens(self.encode_frames(frames))
        at = audio_tokens(self.encode_waveforms(samples), self.tables)
        return self.score_tokens(vt, at, vi, aj)

    def score_matrix(self, frames: np.ndarray, samples: np.ndarray) -> Tensor:
        """``[k, k]`` scores: entry (i, j) pairs visual clip i with audio clip j."""
        k = frames.shape[0]
        if samples.shape[0] != k:
            raise ShapeError(f"{k} visual clips but {samples.shape[0]} audio clips")
        vi, aj = np.divmod(np.arange(k * k), k)
        return ops.reshape(self.score_pairs(frames, samples, vi, aj), (k, k))

    def score_windows(self, frames: np.ndarray, windows: np.ndarray) -> np.ndarray:
        """One visual window ``[3, T, H, W]`` against audio windows ``[G, N]`` -> ``[G]``."""
        G = windows.shape[0]
        return self.score_pairs(frames[None], windows, np.zeros(G, dtype=np.intp), np.arange(G)).data.copy()

    def fingerprint(self) -> str:
        """Digest of variant, config and parameter bytes."""
        h = hashlib.sha256(self.variant.encode())
        h.update(json.dumps(dataclasses.asdict(self.cfg), sort_keys=True).encode())
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def forward(self, clip: VisualClip, wave: AudioWaveform) -> tuple[Tensor, AttentionRecord]:
        """Score one (visual clip, waveform) pair."""
        if clip.frames.shape[1] * self.cfg.samples_per_frame != wave.samples.shape[-1]:
            raise DataError(f"{clip.frames.shape[1]} frames need {clip.frames.shape[1] * self.cfg.samples_per_frame} "
                            f"audio samples, got {wave.samples.shape[-1]}")
        s = self.score_pairs(clip.frames[None], wave.samples[None], [0], [0])
        return ops.reshape(s, ()), self.last_record

    # -- persistence ------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise DataError(f"checkpoint parameters do not match model: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DataError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def save_checkpoint(model: AVSTModel, path: str | Path, extra: dict | None = None) -> None:
    """JSON manifest line, then little-endian float64 parameter blocks in manifest order."""
    entries = []
    offset = 0
    for name, p in model.named_parameters():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "config": dataclasses.asdict(model.cfg),
        "parameters": entries,
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for _, p in model.named_parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            manifest = json.loads(fh.readline())
            blob = fh.read()
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt checkpoint manifest in {path}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not an avsync checkpoint")
    flat = np.frombuffer(blob, dtype="<f8")
    state = {}
    for e in manifest["parameters"]:
        n = int(np.prod(e["shape"]))
        if e["offset"] + n > flat.size:
            raise DataError(f"checkpoint {path} is truncated at parameter {e['name']}")
        state[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return manifest, state


def load_checkpoint(path: str | Path) -> AVSTModel:
    manifest, state = read_checkpoint(path)
    cfg = ModelConfig(**manifest["config"])
    model = AVSTModel(cfg, manifest["variant"])
    model.load_state_dict(state)
    return model
