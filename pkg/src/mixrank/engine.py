"""Prefill-only scoring engine: paged KV storage and three serving modes.

All three modes run the same segment kernel (a shared prefix segment, then
one segment per item) and differ only in orchestration:

* ``score_naive``      - every item is prefilled as an independent
  prefix+item sequence; the prefix work repeats per item.
* ``score_prefix_cached`` - the prefix is prefilled once; each item's suffix
  attends to the cached prefix KV in the pool plus itself causally.
* ``score_multi_item`` - one concatenated sequence under an item-aware mask,
  with per-item position ids restarting right after the prefix.

Because every segment is processed with identical array shapes and a fixed
key order in all modes, the mode scores agree bitwise in double precision.
Counters are measured from the actual mask/loop extents: ``attention_pairs``
counts attended (query, key) pairs per sequence position and ``linear_rows``
counts prefilled token rows, both once per request (architecture constants
dropped, matching the cost-model forms).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ContractError, ShapeError
from .mix import DEFAULT_TOKENIZER, EmbeddedItem, TextItem, Tokenizer
from .model import NEG_MASK, MaskPolicy, Params, rope_tables

DEFAULT_PAGE_SIZE = 16


# -- paged KV storage -----------------------------------------------------------


@dataclass
class _Lease:
    pages: list[int]
    rows: int = 0


class KVPool:
    """Paged key/value store with per-request leases and compute counters.

    Pages are fixed-size row blocks; a request leases whole pages and returns
    all of them on release. No page ever belongs to two leases.
    """

    def __init__(self, layers: int, heads: int, head_dim: int,
                 page_size: int = DEFAULT_PAGE_SIZE, capacity_pages: int = 256):
        if page_size < 1 or capacity_pages < 1:
            raise ValueError("page_size and capacity_pages must be positive")
        self.page_size = page_size
        self.capacity = capacity_pages
        shape = (capacity_pages, layers, page_size, heads, head_dim)
        self._k = np.zeros(shape)
        self._v = np.zeros(shape)
        self._free: list[int] = list(range(capacity_pages - 1, -1, -1))  # pop() -> lowest id
        self._leases: dict[str, _Lease] = {}
        # lifetime compute counters, fed by the engine; monotone by construction
        self.attended_pairs = 0
        self.token_rows = 0

    def note_compute(self, attended_pairs: int, token_rows: int) -> None:
        self.attended_pairs += attended_pairs
        self.token_rows += token_rows

    @property
    def free_pages(self) -> int:
        return len(self._free)

    @property
    def leased_pages(self) -> int:
        return sum(len(lease.pages) for lease in self._leases.values())

    def lease_pages(self, request_id: str) -> list[int]:
        return list(self._require(request_id).pages)

    def alloc_rows(self, request_id: str, n_rows: int) -> None:
        """Extend (or open) a lease so it can hold `n_rows` more KV rows."""
        lease = self._leases.get(request_id)
        fresh = lease is None
        if fresh:
            lease = _Lease(pages=[])
        needed = math.ceil((lease.rows + n_rows) / self.page_size) - len(lease.pages)
        if needed > len(self._free):
            # no lease state changes on failure: a rejected request leaves
            # the pool exactly as it was
            raise CapacityError(
                f"pool exhausted: request {request_id!r} needs {needed} more pages, "
                f"{len(self._free)} free",
                required_pages=needed, free_pages=len(self._free))
        if fresh:
            self._leases[request_id] = lease
        for _ in range(needed):
            lease.pages.append(self._free.pop())
        lease.rows += n_rows

    def _locate(self, lease: _Lease, start: int, stop: int):
        row = start
        while row < stop:
            page_index, slot = divmod(row, self.page_size)
            take = min(self.page_size - slot, stop - row)
            yield lease.pages[page_index], slot, take, row - start
            row += take

    def write(self, request_id: str, layer: int, start_row: int,
              k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        lease = self._require(request_id)
        stop = start_row + k_rows.shape[0]
        if stop > lease.rows:
            raise ContractError(f"write past lease of {lease.rows} rows")
        for page, slot, take, off in self._locate(lease, start_row, stop):
            self._k[page, layer, slot:slot + take] = k_rows[off:off + take]
            self._v[page, layer, slot:slot + take] = v_rows[off:off + take]

    def gather(self, request_id: str, layer: int, start: int, stop: int
               ) -> tuple[np.ndarray, np.ndarray]:
        lease = self._require(request_id)
        if stop > lease.rows:
            raise ContractError(f"gather past lease of {lease.rows} rows")
        ks, vs = [], []
        for page, slot, take, _ in self._locate(lease, start, stop):
            ks.append(self._k[page, layer, slot:slot + take])
            vs.append(self._v[page, layer, slot:slot + take])
        return np.concatenate(ks, axis=0), np.concatenate(vs, axis=0)

    def release(self, request_id: str) -> None:
        lease = self._leases.pop(request_id, None)
        if lease is None:
            raise ContractError(f"release of unknown or already-released lease {request_id!r}")
        self._free.extend(sorted(lease.pages, reverse=True))

    def _require(self, request_id: str) -> _Lease:
        lease = self._leases.get(request_id)
        if lease is None:
            raise ContractError(f"no lease for request {request_id!r}")
        return lease


def release(pool: KVPool, request_id: str) -> None:
    """Return every page of the request's lease to the free list."""
    pool.release(request_id)


# -- batches and reports -------------------------------------------------------------


@dataclass(frozen=True)
class ItemSpec:
    """One item's suffix rows: optional precomputed rows, then token ids.

    The helpers append the end-of-item token; a bare ItemSpec may be empty
    (a degenerate prefix-only sequence, allowed in naive/cached modes).
    """

    embed_rows: np.ndarray | None = None
    tokens: tuple[int, ...] = ()

    def __post_init__(self):
        if self.embed_rows is not None and self.embed_rows.ndim != 2:
            raise ShapeError("embed_rows must be 2-d (rows, hidden)")

    def __len__(self) -> int:
        rows = 0 if self.embed_rows is None else self.embed_rows.shape[0]
        return rows + len(self.tokens)

    @staticmethod
    def from_text(item_tokens, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> "ItemSpec":
        tokenizer.validate_body(item_tokens, "item")
        return ItemSpec(tokens=(*item_tokens, tokenizer.eoi))

    @staticmethod
    def from_rows(rows: np.ndarray, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> "ItemSpec":
        return ItemSpec(embed_rows=np.asarray(rows, dtype=np.float64),
                        tokens=(tokenizer.eoi,))


def _normalize_item(item) -> ItemSpec:
    if isinstance(item, ItemSpec):
        return item
    if isinstance(item, TextItem):
        return ItemSpec.from_text(item.tokens)
    if isinstance(item, EmbeddedItem):
        return ItemSpec.from_rows(item.rows)
    raise ContractError(f"unsupported item type {type(item).__name__}")


@dataclass
class ScoringBatch:
    """One query's shared prefix plus its candidate item blocks."""

    shared_prefix: tuple[int, ...]
    items: list

    def __post_init__(self):
        self.shared_prefix = tuple(int(t) for t in self.shared_prefix)
        if not self.items:
            raise ShapeError("a scoring batch needs at least one item")
        self.items = [_normalize_item(i) for i in self.items]

    @property
    def item_lengths(self) -> list[int]:
        return [len(i) for i in self.items]


@dataclass
class CostReport:
    attention_pairs: int = 0
    linear_rows: int = 0
    mode: str = ""

    def to_dict(self) -> dict:
        return {"attention_pairs": self.attention_pairs,
                "linear_rows": self.linear_rows, "mode": self.mode}


# -- model math -------------------------------------------------------------------------


class EngineModel:
    """Inference-ready numpy view of ranker Params (binary head required)."""

    def __init__(self, ranker: Params):
        if ranker.head_weight is None:
            raise ContractError("engine needs a ranker with a binary head")
        cfg = ranker.config
        self.config = cfg
        self.embedding = ranker.token_embedding.data
        self.head = ranker.head_weight.data
        self.final_norm = ranker.final_norm.data
        self.layers = [
            {name: getattr(layer, name).data
             for name in ("wq", "wk", "wv", "wo", "attn_norm", "ffn_norm",
                          "w_gate", "w_up", "w_down")}
            for layer in ranker.layers
        ]
        self.scale = 1.0 / np.sqrt(cfg.head_dim)

    def embed(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ShapeError("token id out of vocab")
        return self.embedding[ids]

    def head_probs(self, h_last: np.ndarray) -> np.ndarray:
        logits = h_last @ self.head
        shifted = logits - logits.max()
        e = np.exp(shifted)
        return e / e.sum()


def _rms(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    scale = ((x * x).mean(axis=-1, keepdims=True) + eps) ** -0.5
    return x * scale * gain


def _silu(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-ax)), np.exp(-ax) / (1.0 + np.exp(-ax)))
    return x * sig


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (n, heads, head_dim); cos/sin: (n, head_dim)
    half = x.shape[-1] // 2
    rotated = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return x * cos[:, None, :] + rotated * sin[:, None, :]


@dataclass
class _Segment:
    rows: np.ndarray       # (n, H) input embeddings
    positions: np.ndarray  # (n,)
    kv_offset: int         # this segment's row offset inside the lease
    ctx_start: int = 0     # lease rows [ctx_start, ctx_start + ctx_rows)
    ctx_rows: int = 0      # attended as context ahead of the causal self part


def _prefill(model: EngineModel, pool: KVPool, request_id: str,
             segments: list[_Segment], report: CostReport) -> list[np.ndarray]:
    """Run all layers over the segments; returns final hidden rows per segment.

    Per segment and layer, attention is a single batched matmul over
    [context keys; own keys] with the own part upper-triangle masked. A given
    (query row, key set) pair therefore sees identical arithmetic in every
    mode, and the measured counters are read straight off the mask.
    """
    heads, head_dim = model.config.heads, model.config.head_dim
    hidden = [seg.rows for seg in segments]
    ropes = [rope_tables(seg.positions, head_dim) for seg in segments]
    masks = []
    for seg in segments:
        n = seg.rows.shape[0]
        block = np.zeros((n, seg.ctx_rows + n))
        block[:, seg.ctx_rows:][np.triu_indices(n, k=1)] = NEG_MASK
        masks.append(block)
        pairs = int(np.count_nonzero(block == 0.0))
        report.attention_pairs += pairs
        report.linear_rows += n
        pool.note_compute(pairs, n)

    for layer_index, layer in enumerate(model.layers):
        for si, seg in enumerate(segments):
            n = seg.rows.shape[0]
            if n == 0:
                continue
            x = _rms(hidden[si], layer["attn_norm"])
            q = (x @ layer["wq"]).reshape(n, heads, head_dim)
            k = (x @ layer["wk"]).reshape(n, heads, head_dim)
            v = (x @ layer["wv"]).reshape(n, heads, head_dim)
            cos, sin = ropes[si]
            q = _apply_rope(q, cos, sin)
            k = _apply_rope(k, cos, sin)
            pool.write(request_id, layer_index, seg.kv_offset, k, v)

            if seg.ctx_rows:
                k_ctx, v_ctx = pool.gather(request_id, layer_index,
                                           seg.ctx_start, seg.ctx_start + seg.ctx_rows)
                k_all = np.concatenate([k_ctx, k], axis=0)
                v_all = np.concatenate([v_ctx, v], axis=0)
            else:
                k_all, v_all = k, v

            qh = np.ascontiguousarray(q.transpose(1, 0, 2))
            kh = np.ascontiguousarray(k_all.transpose(1, 0, 2))
            vh = np.ascontiguousarray(v_all.transpose(1, 0, 2))
            scores = qh @ kh.transpose(0, 2, 1) * model.scale + masks[si]
            scores -= scores.max(axis=-1, keepdims=True)
            weights = np.exp(scores)
            weights /= weights.sum(axis=-1, keepdims=True)
            attn = (weights @ vh).transpose(1, 0, 2).reshape(n, model.config.hidden)
            h = hidden[si] + attn @ layer["wo"]

            x = _rms(h, layer["ffn_norm"])
            hidden[si] = h + (_silu(x @ layer["w_gate"]) * (x @ layer["w_up"])) @ layer["w_down"]

    return [_rms(h, model.final_norm) if h.shape[0] else h for h in hidden]


def _item_rows(model: EngineModel, item: ItemSpec) -> np.ndarray:
    parts = []
    if item.embed_rows is not None:
        if item.embed_rows.shape[1] != model.config.hidden:
            raise ShapeError("item rows width does not match model hidden size")
        parts.append(item.embed_rows)
    if item.tokens:
        parts.append(model.embed(list(item.tokens)))
    if not parts:
        return np.zeros((0, model.config.hidden))
    return np.concatenate(parts, axis=0)


_request_counter = itertools.count()


def _auto_request_id(mode: str) -> str:
    return f"{mode}-{next(_request_counter)}"


def _make_pool(model: EngineModel, rows: int, page_size: int = DEFAULT_PAGE_SIZE) -> KVPool:
    cfg = model.config
    return KVPool(cfg.layers, cfg.heads, cfg.head_dim, page_size=page_size,
                  capacity_pages=math.ceil(max(rows, 1) / page_size) + 1)


# -- the three serving modes ---------------------------------------------------------


def score_naive(model: EngineModel, batch: ScoringBatch, pool: KVPool | None = None,
                request_id: str | None = None, free: bool = True
                ) -> tuple[list[float], CostReport]:
    """Independent full prefix+item prefill per item."""
    t_q = len(batch.shared_prefix)
    lens = batch.item_lengths
    for length in lens:
        if t_q + length > model.config.max_seq:
            raise ShapeError(f"sequence of {t_q + length} exceeds max_seq")
    total_rows = sum(t_q + length for length in lens)
    if pool is None:
        pool = _make_pool(model, total_rows)
    request_id = request_id or _auto_request_id("naive")
    pool.alloc_rows(request_id, total_rows)

    report = CostReport(mode="naive")
    scores: list[float] = []
    offset = 0
    try:
        for item in batch.items:
            rows = _item_rows(model, item)
            n = rows.shape[0]
            segments = [
                _Segment(rows=model.embed(list(batch.shared_prefix)),
                         positions=np.arange(t_q), kv_offset=offset),
                _Segment(rows=rows, positions=np.arange(t_q, t_q + n),
                         kv_offset=offset + t_q, ctx_start=offset, ctx_rows=t_q),
            ]
            finals = _prefill(model, pool, request_id, segments, report)
            h_last = finals[1][-1] if n else finals[0][-1]
            scores.append(float(model.head_probs(h_last)[0]))
            offset += t_q + n
    finally:
        if free:
            pool.release(request_id)
    return scores, report


def score_prefix_cached(model: EngineModel, batch: ScoringBatch, pool: KVPool | None = None,
                        request_id: str | None = None, free: bool = True
                        ) -> tuple[list[float], CostReport]:
    """Prefix prefilled once; item suffixes attend to the cached prefix KV."""
    t_q = len(batch.shared_prefix)
    lens = batch.item_lengths
    for length in lens:
        if t_q + length > model.config.max_seq:
            raise ShapeError(f"sequence of {t_q + length} exceeds max_seq")
    total_rows = t_q + sum(lens)
    if pool is None:
        pool = _make_pool(model, total_rows)
    request_id = request_id or _auto_request_id("cached")
    pool.alloc_rows(request_id, total_rows)

    report = CostReport(mode="prefix_cached")
    try:
        segments = [_Segment(rows=model.embed(list(batch.shared_prefix)),
                             positions=np.arange(t_q), kv_offset=0)]
        offset = t_q
        for item in batch.items:
            rows = _item_rows(model, item)
            n = rows.shape[0]
            segments.append(_Segment(rows=rows, positions=np.arange(t_q, t_q + n),
                                     kv_offset=offset, ctx_start=0, ctx_rows=t_q))
            offset += n
        finals = _prefill(model, pool, request_id, segments, report)
        scores = []
        for si in range(1, len(segments)):
            h_last = finals[si][-1] if finals[si].shape[0] else finals[0][-1]
            scores.append(float(model.head_probs(h_last)[0]))
    finally:
        if free:
            pool.release(request_id)
    return scores, report


def score_multi_item(model: EngineModel, batch: ScoringBatch, pool: KVPool | None = None,
                     request_id: str | None = None, free: bool = True
                     ) -> tuple[list[float], CostReport]:
    """Single concatenated sequence under an item-aware mask.

    Per-item position ids restart at the prefix boundary so each item sees
    the same offsets it would in its own sequence; this is what makes the
    mode agree with the independent forwards under rotary offsets.
    """
    t_q = len(batch.shared_prefix)
    lens = batch.item_lengths
    total = t_q + sum(lens)
    if total > model.config.max_seq:
        raise ShapeError(f"multi-item sequence of {total} exceeds max_seq")

    spans = []
    cursor = t_q
    for length in lens:
        spans.append((cursor, length))
        cursor += length
    policy = MaskPolicy("prefix_plus_item", prefix_len=t_q, item_spans=tuple(spans))
    policy.validate(total)

    if pool is None:
        pool = _make_pool(model, total)
    request_id = request_id or _auto_request_id("multi")
    pool.alloc_rows(request_id, total)

    report = CostReport(mode="multi_item")
    try:
        segments = [_Segment(rows=model.embed(list(batch.shared_prefix)),
                             positions=np.arange(t_q), kv_offset=0)]
        for item, (start, length) in zip(batch.items, spans):
            rows = _item_rows(model, item)
            segments.append(_Segment(rows=rows, positions=np.arange(t_q, t_q + length),
                                     kv_offset=start, ctx_start=0,
                                     ctx_rows=policy.prefix_len))
        finals = _prefill(model, pool, request_id, segments, report)
        scores = [float(model.head_probs(finals[si][-1])[0])
                  for si in range(1, len(segments))]
    finally:
        if free:
            pool.release(request_id)
    return scores, report


MODES = {
    "naive": score_naive,
    "prefix_cached": score_prefix_cached,
    "multi_item": score_multi_item,
}
