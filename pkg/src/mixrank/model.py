"""Decoder-only transformer shared by the encoder and ranker models.

Pre-norm blocks with RMS normalization, rotary position offsets, and a
SwiGLU feed-forward. The forward pass maps a sequence already in hidden
space (token embeddings and/or precomputed item rows) to output hidden
states; an optional two-class head turns the last hidden state into a
(p_yes, p_no) distribution.

Masking is additive: disallowed (query, key) pairs get NEG_MASK, which
absorbs any finite score exactly, so masked keys contribute exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

# Large enough that score + NEG_MASK == NEG_MASK bitwise for |score| < 5e13,
# small enough to stay finite through exp (underflows to exact 0.0).
NEG_MASK = -1.0e30

RMS_EPS = 1e-6
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 67
    hidden: int = 32
    layers: int = 2
    heads: int = 2
    ffn_mult: float = 4.0
    max_seq: int = 4096
    head_mode: str = "binary"  # "binary" | "none"

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ShapeError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 2 != 0:
            raise ShapeError("head dimension must be even for rotary offsets")
        if self.max_seq < 1:
            raise ShapeError("max_seq must be >= 1")
        if self.head_mode not in ("binary", "none"):
            raise ShapeError(f"unknown head_mode {self.head_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_dim(self) -> int:
        return int(self.ffn_mult * self.hidden)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "hidden": self.hidden, "layers": self.layers,
            "heads": self.heads, "ffn_mult": self.ffn_mult, "max_seq": self.max_seq,
            "head_mode": self.head_mode,
        }


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    attn_norm: Tensor
    ffn_norm: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class Params:
    """All trainable tensors for one model instance."""

    config: ModelConfig
    token_embedding: Tensor
    layers: list[LayerParams]
    final_norm: Tensor
    head_weight: Tensor | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = [("token_embedding", self.token_embedding)]
        for i, layer in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "attn_norm", "ffn_norm",
                         "w_gate", "w_up", "w_down"):
                named.append((f"layers.{i}.{name}", getattr(layer, name)))
        named.append(("final_norm", self.final_norm))
        if self.head_weight is not None:
            named.append(("head_weight", self.head_weight))
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grads(self) -> None:
        for t in self.parameters():
            t.zero_grad()


def init_params(config: ModelConfig, seed: int) -> Params:
    """Scaled-normal initialization (std 0.02/sqrt(layers)) from an explicit seed."""
    rng = np.random.default_rng(seed)
    std = 0.02 / np.sqrt(config.layers)
    h, f = config.hidden, config.ffn_dim

    def w(*shape):
        return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

    layers = [
        LayerParams(
            wq=w(h, h), wk=w(h, h), wv=w(h, h), wo=w(h, h),
            attn_norm=Tensor(np.ones(h), requires_grad=True),
            ffn_norm=Tensor(np.ones(h), requires_grad=True),
            w_gate=w(h, f), w_up=w(h, f), w_down=w(f, h),
        )
        for _ in range(config.layers)
    ]
    head = w(h, 2) if config.head_mode == "binary" else None
    return Params(
        config=config,
        token_embedding=w(config.vocab_size, h),
        layers=layers,
        final_norm=Tensor(np.ones(h), requires_grad=True),
        head_weight=head,
    )


# -- attention masking ---------------------------------------------------------


@dataclass(frozen=True)
class MaskPolicy:
    """Which keys each query row may attend to.

    `causal` is plain lower-triangular attention. `prefix_plus_item` gives
    every row access to the shared prefix, and causal access within its own
    item span only; the spans must tile the post-prefix range so each row has
    exactly one owner.
    """

    kind: str = "causal"  # "causal" | "prefix_plus_item"
    prefix_len: int = 0
    item_spans: tuple[tuple[int, int], ...] = ()

    def validate(self, seq_len: int) -> None:
        if self.kind == "causal":
            return
        if self.kind != "prefix_plus_item":
            raise ContractError(f"unknown mask kind {self.kind!r}")
        if not 0 <= self.prefix_len <= seq_len:
            raise ContractError("prefix length outside sequence")
        cursor = self.prefix_len
        for start, length in self.item_spans:
            if length < 1:
                raise ContractError("empty item span")
            if start != cursor:
                raise ContractError(
                    f"item spans must tile the post-prefix range; gap/overlap at {start}")
            cursor = start + length
        if cursor != seq_len:
            raise ContractError("item spans do not cover the sequence tail")


def mask_matrix(policy: MaskPolicy, seq_len: int) -> np.ndarray:
    """Additive (seq_len, seq_len) mask: 0.0 where attending is allowed, NEG_MASK where not."""
    policy.validate(seq_len)
    tri = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    if policy.kind == "causal":
        allowed = tri
    else:
        p = policy.prefix_len
        allowed = np.zeros((seq_len, seq_len), dtype=bool)
        allowed[:p, :p] = tri[:p, :p]  # causal within the prefix
        for start, length in policy.item_spans:
            rows = slice(start, start + length)
            allowed[rows, :p] = True  # every item sees the whole prefix
            allowed[rows, rows] = np.tril(np.ones((length, length), dtype=bool))
    return np.where(allowed, 0.0, NEG_MASK)


# -- rotary position offsets ------------------------------------------------------


def rope_tables(positions: Sequence[int], head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), head_dim), split-half layout."""
    pos = np.asarray(positions, dtype=np.float64)
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half) * 2.0 / head_dim)
    angles = pos[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1)
    return cos, sin


def _rotate_half(x: Tensor) -> Tensor:
    half = x.shape[-1] // 2
    x1 = x.narrow(-1, 0, half)
    x2 = x.narrow(-1, half, half)
    return ad.concat([-x2, x1], axis=-1)


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    return x * Tensor(cos) + _rotate_half(x) * Tensor(sin)


# -- forward pass --------------------------------------------------------------------


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    scale = ((x * x).mean(axis=-1, keepdims=True) + eps).pow(-0.5)
    return x * scale * gain


def embed_tokens(params: Params, tokens: Sequence[int]) -> Tensor:
    """Look up embedding-table rows; raises on out-of-vocab ids."""
    return ad.embedding(params.token_embedding, np.asarray(tokens, dtype=np.int64))


def forward_hidden(params: Params, h_in: Tensor, mask: MaskPolicy,
                   positions: Sequence[int]) -> Tensor:
    """Run the transformer stack over `h_in` ((L, H) or (B, L, H)).

    Positions drive the rotary offsets and nothing else, so two calls with
    identical (h_in, mask, positions) are bitwise identical.
    """
    cfg = params.config
    seq_len = h_in.shape[-2]
    if h_in.shape[-1] != cfg.hidden:
        raise ShapeError(f"hidden width {h_in.shape[-1]} != {cfg.hidden}")
    if len(positions) != seq_len:
        raise ContractError(f"{len(positions)} positions for sequence of {seq_len}")
    if seq_len > cfg.max_seq:
        raise ShapeError(f"sequence length {seq_len} exceeds max_seq {cfg.max_seq}")
    mask.validate(seq_len)

    add_mask = Tensor(mask_matrix(mask, seq_len))
    cos, sin = rope_tables(positions, cfg.head_dim)
    scale = 1.0 / np.sqrt(cfg.head_dim)

    def split_heads(x: Tensor) -> Tensor:
        x = x.reshape(*x.shape[:-1], cfg.heads, cfg.head_dim)
        return x.swapaxes(-3, -2)  # (.., heads, L, head_dim)

    h = h_in
    for layer in params.layers:
        x = rms_norm(h, layer.attn_norm)
        q = split_heads(x @ layer.wq)
        k = split_heads(x @ layer.wk)
        v = split_heads(x @ layer.wv)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        scores = (q @ k.swapaxes(-1, -2)) * scale + add_mask
        attn = scores.softmax() @ v
        attn = attn.swapaxes(-3, -2).reshape(*h.shape[:-1], cfg.hidden)
        h = h + attn @ layer.wo

        x = rms_norm(h, layer.ffn_norm)
        h = h + (ad.silu(x @ layer.w_gate) * (x @ layer.w_up)) @ layer.w_down
    return rms_norm(h, params.final_norm)


@dataclass
class ScoreDistribution:
    """(p_yes, p_no) pair; `probs` keeps the autodiff handle, last axis size 2."""

    probs: Tensor

    @property
    def p_yes(self) -> float:
        return float(self.probs.data[..., 0]) if self.probs.data.ndim == 1 \
            else self.probs.data[..., 0]

    @property
    def p_no(self) -> float:
        return float(self.probs.data[..., 1]) if self.probs.data.ndim == 1 \
            else self.probs.data[..., 1]


def binary_head(params: Params, h_last: Tensor) -> ScoreDistribution:
    """softmax(h_last @ head_weight) as a two-class distribution."""
    if params.head_weight is None:
        raise ContractError("model was built with head_mode='none'")
    if h_last.shape[-1] != params.config.hidden:
        raise ShapeError("hidden width mismatch at head")
    logits = h_last.reshape(*h_last.shape[:-1], 1, params.config.hidden) @ params.head_weight
    probs = logits.reshape(*h_last.shape[:-1], 2).softmax()
    return ScoreDistribution(probs=probs)
