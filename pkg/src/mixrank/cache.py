"""Nearline embedding cache: versioned item rows with append-only persistence.

Entries are keyed by (item_id, model_version); a lookup never crosses model
versions. The on-disk form is an append-only log of records rebuilt into an
in-memory index on open (last write wins), so the refresh path can upsert
continuously. Readers share the store; writes are serialized by a lock.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import content_hash
from .errors import DecodeError
from .mix import Tokenizer, DEFAULT_TOKENIZER, encode_item
from .model import Params
from .payload import decode_payload, encode_payload


@dataclass
class EmbeddingCacheEntry:
    item_id: str
    model_version: str
    rows: np.ndarray
    updated_at: float


class EmbeddingCache:
    """In-memory (item_id, version) -> rows map with an optional log file."""

    def __init__(self, hidden: int, path: str | Path | None = None):
        self.hidden = hidden
        self.path = Path(path) if path is not None else None
        self._entries: dict[tuple[str, str], EmbeddingCacheEntry] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._replay_log()

    def __len__(self) -> int:
        return len(self._entries)

    def put(self, item_id: str, model_version: str, rows: np.ndarray,
            updated_at: float | None = None) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.hidden:
            raise ValueError(
                f"cache rows must be (t_s, {self.hidden}), got {rows.shape}")
        entry = EmbeddingCacheEntry(item_id=str(item_id), model_version=model_version,
                                    rows=rows.copy(),
                                    updated_at=time.time() if updated_at is None else updated_at)
        with self._lock:
            self._entries[(entry.item_id, model_version)] = entry
            if self.path is not None:
                self._append_record(entry)

    def get(self, item_id: str, model_version: str) -> np.ndarray | None:
        entry = self._entries.get((str(item_id), model_version))
        return None if entry is None else entry.rows

    def entry(self, item_id: str, model_version: str) -> EmbeddingCacheEntry | None:
        return self._entries.get((str(item_id), model_version))

    # -- persistence: u32 record_len | u16 id_len | id | u16 ver_len | ver |
    #    f64 updated_at | feature payload

    def _append_record(self, entry: EmbeddingCacheEntry) -> None:
        item_b = entry.item_id.encode("utf-8")
        ver_b = entry.model_version.encode("utf-8")
        payload = encode_payload(entry.rows)
        record = (struct.pack("<H", len(item_b)) + item_b +
                  struct.pack("<H", len(ver_b)) + ver_b +
                  struct.pack("<d", entry.updated_at) + payload)
        with open(self.path, "ab") as fh:
            fh.write(struct.pack("<I", len(record)) + record)

    def _replay_log(self) -> None:
        blob = self.path.read_bytes()
        offset = 0
        while offset < len(blob):
            if offset + 4 > len(blob):
                raise DecodeError("cache log truncated at record length", field="record")
            (rec_len,) = struct.unpack("<I", blob[offset:offset + 4])
            record = blob[offset + 4:offset + 4 + rec_len]
            if len(record) != rec_len:
                raise DecodeError("cache log truncated inside record", field="record")
            offset += 4 + rec_len
            (id_len,) = struct.unpack("<H", record[:2])
            item_id = record[2:2 + id_len].decode("utf-8")
            pos = 2 + id_len
            (ver_len,) = struct.unpack("<H", record[pos:pos + 2])
            version = record[pos + 2:pos + 2 + ver_len].decode("utf-8")
            pos = pos + 2 + ver_len
            (updated_at,) = struct.unpack("<d", record[pos:pos + 8])
            rows = decode_payload(record[pos + 8:])
            self._entries[(item_id, version)] = EmbeddingCacheEntry(
                item_id=item_id, model_version=version,
                rows=np.asarray(rows, dtype=np.float64), updated_at=updated_at)


@dataclass
class RefreshResult:
    updated: int
    errors: list[tuple[str, str]]


def refresh(store: EmbeddingCache, encoder: Params, changed_items, t_s: int,
            model_version: str | None = None,
            tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> RefreshResult:
    """Re-encode changed items and upsert them under the encoder's version.

    `changed_items` is an iterable of (item_id, item_tokens). Failures are
    collected per item; the rest still land (partial success).
    """
    version = model_version or content_hash(encoder)
    updated = 0
    errors: list[tuple[str, str]] = []
    for item_id, tokens in changed_items:
        try:
            rows = encode_item(encoder, tokens, t_s, tokenizer).data
            store.put(str(item_id), version, rows)
            updated += 1
        except Exception as exc:  # noqa: BLE001 - per-item error channel
            errors.append((str(item_id), str(exc)))
    return RefreshResult(updated=updated, errors=errors)
