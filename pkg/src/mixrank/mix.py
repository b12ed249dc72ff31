"""Mixed text-embedding prompt construction and scoring.

An item's text is run through the encoder model once; the last `t_s` hidden
rows become its compressed representation. Scoring concatenates the ranker's
embedded query prefix, those item rows, and one end-of-item token, then reads
the two-class head at the final position. The same ranker can also score the
full item text directly (the teacher path, no encoder involved).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .model import (
    MaskPolicy,
    Params,
    ScoreDistribution,
    binary_head,
    embed_tokens,
    forward_hidden,
)


@dataclass(frozen=True)
class Tokenizer:
    """Toy vocabulary: 64 data tokens plus BOS/SEP/EOI specials."""

    data_vocab: int = 64
    bos: int = 64
    sep: int = 65
    eoi: int = 66

    @property
    def vocab_size(self) -> int:
        return self.data_vocab + 3

    def validate_body(self, tokens: Sequence[int], what: str = "body") -> None:
        for t in tokens:
            if not 0 <= t < self.data_vocab:
                raise ShapeError(f"{what} token {t} outside data vocab [0, {self.data_vocab})")

    def ranker_prefix(self, q_tokens: Sequence[int]) -> list[int]:
        """[BOS] query [SEP]: the shared per-query prefix."""
        self.validate_body(q_tokens, "query")
        return [self.bos, *q_tokens, self.sep]

    def encoder_prompt(self, item_tokens: Sequence[int]) -> list[int]:
        """[BOS] item: the encoder-side view of the item text."""
        self.validate_body(item_tokens, "item")
        return [self.bos, *item_tokens]

    def fulltext_prompt(self, q_tokens: Sequence[int], item_tokens: Sequence[int]) -> list[int]:
        """[BOS] query [SEP] item [EOI]: the teacher / full-text prompt."""
        return [*self.ranker_prefix(q_tokens), *item_tokens, self.eoi]


DEFAULT_TOKENIZER = Tokenizer()


@dataclass(frozen=True)
class TextItem:
    """Item carried as raw token ids."""

    tokens: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class EmbeddedItem:
    """Item carried as precomputed encoder rows (t_s x hidden)."""

    rows: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ShapeError(f"embedded item rows must be (t_s>=1, hidden), got {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise ShapeError("embedded item rows must be finite")

    def __len__(self) -> int:
        return self.rows.shape[0]


@dataclass(frozen=True)
class MixedPrompt:
    """Query prefix ids plus one item block; a trailing EOI token is implied."""

    prefix_tokens: tuple[int, ...]
    item: TextItem | EmbeddedItem


def encode_item(encoder: Params, item_tokens: Sequence[int], t_s: int,
                tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> Tensor:
    """Compress an item to its last `t_s` encoder hidden rows."""
    if not 1 <= t_s <= len(item_tokens):
        raise ShapeError(f"t_s={t_s} outside [1, {len(item_tokens)}]")
    prompt = tokenizer.encoder_prompt(item_tokens)
    h = forward_hidden(encoder, embed_tokens(encoder, prompt),
                       MaskPolicy("causal"), list(range(len(prompt))))
    return h.narrow(-2, len(prompt) - t_s, t_s)


def assemble_mixed(ranker: Params, prefix_tokens: Sequence[int], item_emb: Tensor,
                   tokenizer: Tokenizer = DEFAULT_TOKENIZER
                   ) -> tuple[Tensor, list[int], MaskPolicy]:
    """Concatenate embedded prefix, item rows, and the EOI embedding.

    Item rows keep their values verbatim and take sequential positions
    continuing from the prefix.
    """
    if item_emb.shape[-1] != ranker.config.hidden:
        raise ShapeError(
            f"item rows width {item_emb.shape[-1]} != ranker hidden {ranker.config.hidden}")
    prefix = list(prefix_tokens)
    t_r, t_s = len(prefix), item_emb.shape[-2]
    batch_dims = item_emb.shape[:-2]
    prefix_ids = np.broadcast_to(np.asarray(prefix, dtype=np.int64),
                                 batch_dims + (t_r,))
    eoi_ids = np.broadcast_to(np.asarray([tokenizer.eoi], dtype=np.int64),
                              batch_dims + (1,))
    h = ad.concat([
        ad.embedding(ranker.token_embedding, prefix_ids),
        item_emb,
        ad.embedding(ranker.token_embedding, eoi_ids),
    ], axis=-2)
    positions = list(range(t_r + t_s + 1))
    return h, positions, MaskPolicy("causal")


def _head_at_last(ranker: Params, h: Tensor) -> tuple[ScoreDistribution, Tensor]:
    seq_len = h.shape[-2]
    h_last = h.narrow(-2, seq_len - 1, 1).reshape(*h.shape[:-2], ranker.config.hidden)
    return binary_head(ranker, h_last), h_last


def mixed_outputs(ranker: Params, encoder: Params, q_tokens: Sequence[int],
                  item_tokens: Sequence[int], t_s: int,
                  tokenizer: Tokenizer = DEFAULT_TOKENIZER
                  ) -> tuple[ScoreDistribution, Tensor]:
    """Full mixed-path forward; returns (distribution, last hidden state).

    Differentiable end to end: gradients reach both ranker and encoder
    parameters.
    """
    item_emb = encode_item(encoder, item_tokens, t_s, tokenizer)
    return mixed_outputs_precomputed(ranker, q_tokens, item_emb, tokenizer)


def mixed_outputs_precomputed(ranker: Params, q_tokens: Sequence[int], item_emb: Tensor,
                              tokenizer: Tokenizer = DEFAULT_TOKENIZER
                              ) -> tuple[ScoreDistribution, Tensor]:
    prefix = tokenizer.ranker_prefix(q_tokens)
    h_in, positions, mask = assemble_mixed(ranker, prefix, item_emb, tokenizer)
    h = forward_hidden(ranker, h_in, mask, positions)
    return _head_at_last(ranker, h)


def fulltext_outputs(ranker: Params, q_tokens: Sequence[int], item_tokens: Sequence[int],
                     tokenizer: Tokenizer = DEFAULT_TOKENIZER
                     ) -> tuple[ScoreDistribution, Tensor]:
    """Score the raw-text prompt (no encoder); gradients reach ranker only."""
    prompt = tokenizer.fulltext_prompt(q_tokens, item_tokens)
    if len(prompt) > ranker.config.max_seq:
        raise ShapeError(f"full-text prompt of {len(prompt)} exceeds max_seq "
                         f"{ranker.config.max_seq}")
    h = forward_hidden(ranker, embed_tokens(ranker, prompt),
                       MaskPolicy("causal"), list(range(len(prompt))))
    return _head_at_last(ranker, h)


def score_mixed(ranker: Params, encoder: Params, q_tokens: Sequence[int],
                item_tokens: Sequence[int], t_s: int,
                tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> ScoreDistribution:
    return mixed_outputs(ranker, encoder, q_tokens, item_tokens, t_s, tokenizer)[0]


def score_fulltext(ranker: Params, q_tokens: Sequence[int], item_tokens: Sequence[int],
                   tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> ScoreDistribution:
    return fulltext_outputs(ranker, q_tokens, item_tokens, tokenizer)[0]


# -- batched training paths ----------------------------------------------------


def mixed_outputs_batch(ranker: Params, encoder: Params, q_batch: np.ndarray,
                        item_batch: np.ndarray, t_s: int,
                        tokenizer: Tokenizer = DEFAULT_TOKENIZER
                        ) -> tuple[Tensor, Tensor]:
    """(probs (B,2), h_last (B,H)) for same-length query/item batches."""
    batch, t_e = item_batch.shape
    enc_ids = np.concatenate(
        [np.full((batch, 1), tokenizer.bos, dtype=np.int64), item_batch], axis=1)
    h_e = forward_hidden(encoder, ad.embedding(encoder.token_embedding, enc_ids),
                         MaskPolicy("causal"), list(range(t_e + 1)))
    item_emb = h_e.narrow(-2, t_e + 1 - t_s, t_s)

    prefix = np.concatenate([
        np.full((batch, 1), tokenizer.bos, dtype=np.int64),
        q_batch,
        np.full((batch, 1), tokenizer.sep, dtype=np.int64),
    ], axis=1)
    eoi = np.full((batch, 1), tokenizer.eoi, dtype=np.int64)
    h_in = ad.concat([
        ad.embedding(ranker.token_embedding, prefix),
        item_emb,
        ad.embedding(ranker.token_embedding, eoi),
    ], axis=-2)
    seq = prefix.shape[1] + t_s + 1
    h = forward_hidden(ranker, h_in, MaskPolicy("causal"), list(range(seq)))
    dist, h_last = _head_at_last(ranker, h)
    return dist.probs, h_last


def fulltext_outputs_batch(ranker: Params, q_batch: np.ndarray, item_batch: np.ndarray,
                           tokenizer: Tokenizer = DEFAULT_TOKENIZER
                           ) -> tuple[Tensor, Tensor]:
    batch = q_batch.shape[0]
    ids = np.concatenate([
        np.full((batch, 1), tokenizer.bos, dtype=np.int64),
        q_batch,
        np.full((batch, 1), tokenizer.sep, dtype=np.int64),
        item_batch,
        np.full((batch, 1), tokenizer.eoi, dtype=np.int64),
    ], axis=1)
    if ids.shape[1] > ranker.config.max_seq:
        raise ShapeError("full-text prompt exceeds max_seq")
    h = forward_hidden(ranker, ad.embedding(ranker.token_embedding, ids),
                       MaskPolicy("causal"), list(range(ids.shape[1])))
    dist, h_last = _head_at_last(ranker, h)
    return dist.probs, h_last
