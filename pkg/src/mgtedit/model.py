"""Tiny bidirectional multimodal transformer over three token streams.

The streams are concatenated as [text; iterate; condition]: the instruction,
the partially masked image being produced, and the original image injected as
a reference. Every block runs full biased attention over the concatenation
followed by a feed-forward, both post-normalized. The condition stream shares
the token table with the iterate stream and is pinned to timestep zero; its
coupling to the iterate is controlled by a single scalar gamma applied as an
additive log-bias on the cross-stream attention logits.

Positions use 2D rotary embeddings: image tokens rotate by their (row, col),
text sits at (0, 0) where every rotation is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .rng import substream

NEG_INF = -1e9  # additive mask sentinel; guarantees exact-zero softmax weight

TIME_FREQS = 4  # sin/cos frequency pairs in the timestep featurization


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; N = grid_h*grid_w image tokens."""

    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    vocab_size: int = 64
    text_vocab: int = 32
    grid_h: int = 16
    grid_w: int = 16
    max_text_len: int = 8

    def __post_init__(self):
        counts = (self.d_model, self.n_layers, self.n_heads, self.vocab_size,
                  self.text_vocab, self.grid_h, self.grid_w, self.max_text_len)
        if any(c < 1 for c in counts):
            raise ValueError("all config counts must be >= 1")
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")
        if self.d_model % (2 * self.n_heads):
            raise ValueError("d_model must be divisible by 2*n_heads")

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mask_id(self) -> int:
        """Sentinel token index for masked iterate positions."""
        return self.vocab_size

    def to_kv(self) -> dict[str, str]:
        return {
            "d_model": str(self.d_model), "n_layers": str(self.n_layers),
            "n_heads": str(self.n_heads), "vocab_size": str(self.vocab_size),
            "text_vocab": str(self.text_vocab), "grid_h": str(self.grid_h),
            "grid_w": str(self.grid_w), "max_text_len": str(self.max_text_len),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        return cls(**{k: int(kv[k]) for k in (
            "d_model", "n_layers", "n_heads", "vocab_size", "text_vocab",
            "grid_h", "grid_w", "max_text_len")})


@dataclass(frozen=True)
class BiasSpec:
    """Condition strength gamma applied to iterate<->condition attention."""

    gamma: float = 1.0

    def __post_init__(self):
        if not (self.gamma >= 0.0):
            raise ValueError("gamma must be non-negative")


@dataclass(frozen=True)
class TokenStreams:
    """One forward pass worth of inputs: text, iterate, condition indices."""

    text: np.ndarray
    iterate: np.ndarray
    condition: np.ndarray

    def __post_init__(self):
        for name in ("text", "iterate", "condition"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.int64))
            if arr.ndim != 1 or arr.size == 0:
                raise ValueError(f"{name} must be a non-empty 1D index array")
            object.__setattr__(self, name, arr)
        if self.iterate.shape != self.condition.shape:
            raise ValueError("iterate and condition must have equal length")

    def validate(self, config: ModelConfig):
        if len(self.text) > config.max_text_len:
            raise ValueError("text longer than max_text_len")
        if self.text.min() < 0 or self.text.max() >= config.text_vocab:
            raise ValueError("text token id out of range")
        if len(self.iterate) != config.n_tokens:
            raise ValueError("iterate length must equal grid_h*grid_w")
        if self.iterate.min() < 0 or self.iterate.max() > config.mask_id:
            raise ValueError("iterate token id out of range")
        if self.condition.min() < 0 or self.condition.max() >= config.vocab_size:
            raise ValueError("condition stream must not contain the mask sentinel")


@dataclass
class AttentionRecord:
    """Post-softmax weights of one head, captured before value-mixing.

    ``weights`` covers the full concatenation, so rows/columns split at
    ``text_len`` and ``text_len + n_image`` into text, iterate, condition.
    """

    layer: int
    head: int
    weights: np.ndarray  # (T, T) row-stochastic
    text_len: int
    n_image: int

    @property
    def offsets(self) -> tuple[int, int]:
        return self.text_len, self.text_len + self.n_image

    def text_to_iterate(self) -> np.ndarray:
        m, mn = self.offsets
        return self.weights[:m, m:mn]

    def text_to_condition(self) -> np.ndarray:
        m, mn = self.offsets
        return self.weights[:m, mn:]

    def iterate_to_condition(self) -> np.ndarray:
        m, mn = self.offsets
        return self.weights[m:mn, mn:]


# --- rotary position encoding ---------------------------------------------

def rope_frequencies(n: int) -> np.ndarray:
    """Geometric ladder 10000^(-k/n), k = 0..n-1."""
    if n == 0:
        return np.zeros(0)
    return 10000.0 ** (-np.arange(n) / n)


def _pair_angles(d: int, i, j) -> np.ndarray:
    """Rotation angle per dimension pair for position (i, j).

    The d/2 pairs split into a leading group rotated by theta_k*i and a
    trailing group rotated by theta_k*j, each with its own ladder.
    """
    n_pairs = d // 2
    n_i = (n_pairs + 1) // 2
    i = np.asarray(i, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    ang_i = np.multiply.outer(i, rope_frequencies(n_i))
    ang_j = np.multiply.outer(j, rope_frequencies(n_pairs - n_i))
    return np.concatenate([ang_i, ang_j], axis=-1)


def rope2d(v: np.ndarray, i: int, j: int) -> np.ndarray:
    """Rotate a d-vector by its grid position; (0,0) is the identity."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] % 2:
        raise ValueError("rope2d requires a 1D vector of even dimension")
    ang = _pair_angles(v.shape[0], i, j)
    c, s = np.cos(ang), np.sin(ang)
    x = v.reshape(-1, 2)
    return np.stack([x[:, 0] * c - x[:, 1] * s,
                     x[:, 0] * s + x[:, 1] * c], axis=1).reshape(-1)


def build_bias(text_len: int, n_image: int, gamma: float) -> np.ndarray:
    """Additive logit bias coupling the iterate and condition image blocks.

    Zero everywhere except the iterate->condition and condition->iterate
    blocks, which hold log(gamma); gamma = 0 uses a large negative sentinel
    so those weights are exactly zero after softmax.
    """
    if not (gamma >= 0.0):
        raise ValueError("gamma must be non-negative")
    t = text_len + 2 * n_image
    bias = np.zeros((t, t))
    val = math.log(gamma) if gamma > 0.0 else NEG_INF
    m, mn = text_len, text_len + n_image
    bias[m:mn, mn:] = val
    bias[mn:, m:mn] = val
    return bias


def _structural_mask(text_len: int, n_image: int) -> np.ndarray:
    """Permanent mask: text never reads the condition block.

    The condition is a reference stream; it reaches the iterate only through
    the gamma-gated cross block. Without this, condition content would leak
    around a gamma = 0 gate via text rows.
    """
    t = text_len + 2 * n_image
    mask = np.zeros((t, t))
    mask[:text_len, text_len + n_image:] = NEG_INF
    return mask


def _time_features(t: float) -> np.ndarray:
    freqs = math.pi * (2.0 ** np.arange(TIME_FREQS))
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)])


class _Block(nn.Module):
    """Biased full attention + feed-forward, both post-normalized."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln_attn = nn.LayerNorm(d)
        self.ff_in = nn.Linear(d, 4 * d)
        self.ff_out = nn.Linear(4 * d, d)
        self.ln_ff = nn.LayerNorm(d)

    def forward(self, x, cos, sin, bias, capture: bool):
        t, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).reshape(t, 3, self.n_heads, hd).unbind(dim=1)
        q = self._rotate(q, cos, sin)
        k = self._rotate(k, cos, sin)
        logits = torch.einsum("qhd,khd->hqk", q, k) / math.sqrt(hd)
        weights = torch.softmax(logits + bias, dim=-1)
        captured = weights.detach().to(torch.float64).numpy() if capture else None
        mixed = torch.einsum("hqk,khd->qhd", weights, v).reshape(t, d)
        x = self.ln_attn(x + self.proj(mixed))
        x = self.ln_ff(x + self.ff_out(torch.nn.functional.gelu(self.ff_in(x))))
        return x, captured

    @staticmethod
    def _rotate(x, cos, sin):
        t, h, hd = x.shape
        p = x.reshape(t, h, hd // 2, 2)
        x1, x2 = p[..., 0], p[..., 1]
        return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1).reshape(t, h, hd)


class EditModel(nn.Module):
    """The full three-stream transformer with deterministic initialization."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        # One table covers both image streams plus the mask sentinel row, so
        # the condition pathway shares storage with the iterate by construction.
        self.token_emb = nn.Embedding(config.vocab_size + 1, config.d_model)
        self.text_emb = nn.Embedding(config.text_vocab, config.d_model)
        self.time_proj = nn.Linear(2 * TIME_FREQS, config.d_model)
        self.ln_in = nn.LayerNorm(config.d_model)
        self.blocks = nn.ModuleList(
            _Block(config.d_model, config.n_heads) for _ in range(config.n_layers))
        self.head = nn.Linear(config.d_model, config.vocab_size)
        self._init_weights(seed)

    def _init_weights(self, seed: int):
        # Unit-scale embeddings plus fan-in scaled linear maps keep the
        # attention logits at O(1) from the start, which plain SGD needs.
        for idx, (name, param) in enumerate(sorted(self.named_parameters())):
            g = substream(seed, 0x574D, idx)  # path tag "WM"
            with torch.no_grad():
                if name.endswith(".bias"):
                    param.zero_()
                elif param.ndim == 1:
                    param.fill_(1.0)  # layer-norm gains
                else:
                    scale = 1.0 if "emb" in name else param.shape[-1] ** -0.5
                    vals = scale * g.standard_normal(tuple(param.shape))
                    param.copy_(torch.from_numpy(vals).to(param.dtype))

    def _position_tables(self, text_len: int, dtype):
        cfg = self.config
        rows = np.repeat(np.arange(cfg.grid_h), cfg.grid_w)
        cols = np.tile(np.arange(cfg.grid_w), cfg.grid_h)
        i = np.concatenate([np.zeros(text_len), rows, rows])
        j = np.concatenate([np.zeros(text_len), cols, cols])
        ang = _pair_angles(cfg.head_dim, i, j)  # (T, head_dim/2)
        cos = torch.from_numpy(np.cos(ang)).to(dtype).unsqueeze(1)
        sin = torch.from_numpy(np.sin(ang)).to(dtype).unsqueeze(1)
        return cos, sin

    def forward(self, streams: TokenStreams, bias: BiasSpec, t: float = 0.0,
                capture_layers=None):
        """Run the stack; returns (iterate logits (N, V), attention records).

        ``t`` is the iterate stream's normalized timestep; the condition
        stream is always embedded at timestep zero. ``capture_layers`` names
        the layers whose per-head attention records should be returned.
        """
        cfg = self.config
        streams.validate(cfg)
        dtype = self.token_emb.weight.dtype
        m = len(streams.text)
        capture = frozenset() if capture_layers is None else frozenset(capture_layers)
        if any(l < 0 or l >= cfg.n_layers for l in capture):
            raise ValueError("capture layer index out of range")

        t_iter = self.time_proj(torch.from_numpy(_time_features(float(t))).to(dtype))
        t_cond = self.time_proj(torch.from_numpy(_time_features(0.0)).to(dtype))
        x = self.ln_in(torch.cat([
            self.text_emb(torch.from_numpy(streams.text)),
            self.token_emb(torch.from_numpy(streams.iterate)) + t_iter,
            self.token_emb(torch.from_numpy(streams.condition)) + t_cond,
        ]))

        cos, sin = self._position_tables(m, dtype)
        bias_t = torch.from_numpy(
            build_bias(m, cfg.n_tokens, bias.gamma) + _structural_mask(m, cfg.n_tokens)
        ).to(dtype)

        records: list[AttentionRecord] = []
        for layer, block in enumerate(self.blocks):
            x, captured = block(x, cos, sin, bias_t, layer in capture)
            if captured is not None:
                for h in range(cfg.n_heads):
                    records.append(AttentionRecord(
                        layer=layer, head=h, weights=captured[h],
                        text_len=m, n_image=cfg.n_tokens))
        logits = self.head(x[m:m + cfg.n_tokens])
        return logits, records

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Named parameter tensors as float32 arrays, for serialization."""
        return {name: p.detach().numpy().astype(np.float32, copy=True)
                for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        if sorted(params) != sorted(arrays):
            raise ValueError("parameter names do not match the checkpoint")
        with torch.no_grad():
            for name, p in params.items():
                arr = arrays[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {name}")
                p.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(p.dtype))
