"""Multi-worker scoring service over the framed protocol.

A dispatcher accepts connections and routes each score request, by a
deterministic hash of its query tokens, to one of N workers. Every worker
owns a private engine + KV pool and drains its queue serially, so one
request's items are always admitted as a single engine batch (batch
atomicity) and the pool is confined to its worker. The KV lease is released
before the response is written; per-request pool levels land in the worker
log for auditability.
"""

from __future__ import annotations

import hashlib
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .cache import EmbeddingCache
from .engine import MODES, EngineModel, ItemSpec, KVPool, ScoringBatch
from .errors import DecodeError
from .mix import DEFAULT_TOKENIZER, Tokenizer
from .model import Params
from .payload import decode_payload, encode_payload
from .protocol import (
    extract_section,
    pack_body,
    parse_body,
    payload_spans,
    recv_frame,
    send_frame,
)

DEFAULT_MODE = "prefix_cached"


# -- request/response dataclasses (in-process form) ----------------------------------


@dataclass(frozen=True)
class CachedRef:
    item_id: str
    model_version: str | None = None  # None -> service default version


@dataclass(frozen=True)
class InlineRows:
    rows: np.ndarray


@dataclass(frozen=True)
class InlineText:
    tokens: tuple[int, ...]


@dataclass
class ScoreRequest:
    query_tokens: tuple[int, ...]
    items: list  # CachedRef | InlineRows | InlineText
    mode: str = DEFAULT_MODE
    request_id: str = ""


@dataclass
class ScoreResponse:
    request_id: str
    mode: str
    p_yes: list[float | None]       # None where the item errored
    errors: list[str | None]        # aligned with request order
    report: dict


# -- routing --------------------------------------------------------------------------


def route(n_workers: int, query_tokens) -> int:
    """Deterministic worker choice: all batches of a query land together."""
    if n_workers < 1:
        raise ValueError("service has no workers")
    digest = hashlib.sha256(struct.pack(f"<{len(query_tokens)}I", *query_tokens)).digest()
    return int.from_bytes(digest[:8], "little") % n_workers


# -- the service -------------------------------------------------------------------------


@dataclass
class WorkerStats:
    requests: int = 0
    items: int = 0
    log: list[dict] = field(default_factory=list)


class ScoringService:
    def __init__(self, ranker: Params, cache: EmbeddingCache, model_version: str,
                 workers: int = 2, pool_pages: int = 512, page_size: int = 16,
                 tokenizer: Tokenizer = DEFAULT_TOKENIZER):
        if workers < 1:
            raise ValueError("worker count must be >= 1")
        cfg = ranker.config
        self.model = EngineModel(ranker)
        self.cache = cache
        self.model_version = model_version
        self.tokenizer = tokenizer
        self.n_workers = workers
        self.pools = [KVPool(cfg.layers, cfg.heads, cfg.head_dim, page_size=page_size,
                             capacity_pages=pool_pages) for _ in range(workers)]
        self.stats = [WorkerStats() for _ in range(workers)]
        self._queues: list[queue.Queue] = [queue.Queue() for _ in range(workers)]
        self._threads: list[threading.Thread] = []
        self._server_sock: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._running = False

    # -- core scoring (same code path for in-process and wire requests) --------------

    def resolve_items(self, request: ScoreRequest) -> tuple[list[ItemSpec | None], list[str | None]]:
        specs: list[ItemSpec | None] = []
        errors: list[str | None] = []
        for ref in request.items:
            try:
                if isinstance(ref, CachedRef):
                    version = ref.model_version or self.model_version
                    rows = self.cache.get(ref.item_id, version)
                    if rows is None:
                        raise KeyError(f"unknown item id {ref.item_id!r} "
                                       f"for version {version}")
                    specs.append(ItemSpec.from_rows(rows, self.tokenizer))
                elif isinstance(ref, InlineRows):
                    rows = np.asarray(ref.rows, dtype=np.float64)
                    if rows.ndim != 2 or rows.shape[1] != self.model.config.hidden:
                        raise ValueError(
                            f"inline rows must be (t_s, {self.model.config.hidden}), "
                            f"got {rows.shape}")
                    specs.append(ItemSpec.from_rows(rows, self.tokenizer))
                elif isinstance(ref, InlineText):
                    specs.append(ItemSpec.from_text(ref.tokens, self.tokenizer))
                else:
                    raise TypeError(f"unsupported item reference {type(ref).__name__}")
                errors.append(None)
            except Exception as exc:  # noqa: BLE001 - item-level degradation
                specs.append(None)
                errors.append(str(exc))
        return specs, errors

    def execute(self, worker_id: int, request: ScoreRequest) -> ScoreResponse:
        """Score one request on one worker; one engine batch, lease freed after."""
        if request.mode not in MODES:
            raise ValueError(f"unknown engine mode {request.mode!r}")
        specs, errors = self.resolve_items(request)
        live = [s for s in specs if s is not None]
        pool = self.pools[worker_id]
        stats = self.stats[worker_id]
        free_before = pool.free_pages

        p_yes: list[float | None] = [None] * len(specs)
        report = {"attention_pairs": 0, "linear_rows": 0, "mode": request.mode}
        if live:
            batch = ScoringBatch(shared_prefix=request.query_tokens, items=live)
            scores, cost = MODES[request.mode](self.model, batch, pool=pool,
                                               request_id=request.request_id or None)
            report = cost.to_dict()
            it = iter(scores)
            for i, spec in enumerate(specs):
                if spec is not None:
                    p_yes[i] = next(it)

        stats.requests += 1
        stats.items += len(specs)
        stats.log.append({
            "request_id": request.request_id,
            "worker": worker_id,
            "n_items": len(specs),
            "engine_batches": 1 if live else 0,
            "free_before": free_before,
            "free_after": pool.free_pages,
        })
        return ScoreResponse(request_id=request.request_id, mode=request.mode,
                             p_yes=p_yes, errors=errors, report=report)

    def serve_score(self, request: ScoreRequest) -> ScoreResponse:
        """In-process entry point: route and execute synchronously."""
        return self.execute(route(self.n_workers, request.query_tokens), request)

    # -- wire layer -------------------------------------------------------------------

    def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server_sock = socket.create_server((host, port))
        self._running = True
        for wid in range(self.n_workers):
            t = threading.Thread(target=self._worker_loop, args=(wid,), daemon=True)
            t.start()
            self._threads.append(t)
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self._server_sock.getsockname()

    def stop(self) -> None:
        self._running = False
        if self._server_sock is not None:
            self._server_sock.close()
        for q in self._queues:
            q.put(None)

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _ = self._server_sock.accept()
            except OSError:
                return
            threading.Thread(target=self._connection_loop, args=(conn,), daemon=True).start()

    def _connection_loop(self, conn: socket.socket) -> None:
        with conn:
            while True:
                try:
                    body = recv_frame(conn)
                except DecodeError:
                    return
                if body is None:
                    return
                try:
                    response_body = self._handle_body(body)
                except DecodeError as exc:
                    response_body = pack_body({"kind": "error",
                                               "error": str(exc), "field": exc.field})
                try:
                    send_frame(conn, response_body)
                except OSError:
                    return

    def _handle_body(self, body: bytes) -> bytes:
        header = parse_body(body)
        kind = header["kind"]
        if kind == "stats":
            limit = int(header.get("log_limit", 200))
            return pack_body({"kind": "stats_result", "workers": [
                {"requests": s.requests, "items": s.items,
                 "pool_free": self.pools[i].free_pages,
                 "pool_capacity": self.pools[i].capacity,
                 "log": s.log[-limit:] if limit else []}
                for i, s in enumerate(self.stats)]})
        if kind != "score":
            raise DecodeError(f"unknown request kind {kind!r}", field="kind")

        request = self._parse_score_request(header, body)
        worker_id = route(self.n_workers, request.query_tokens)
        done: queue.Queue = queue.Queue()
        self._queues[worker_id].put((request, done))
        result = done.get()
        if isinstance(result, Exception):
            return pack_body({"kind": "error", "error": str(result), "field": "request"})
        return self._encode_response(result)

    def _worker_loop(self, worker_id: int) -> None:
        while True:
            job = self._queues[worker_id].get()
            if job is None:
                return
            request, done = job
            try:
                done.put(self.execute(worker_id, request))
            except Exception as exc:  # noqa: BLE001 - reported to the client
                done.put(exc)

    def _parse_score_request(self, header: dict, body: bytes) -> ScoreRequest:
        try:
            query_tokens = tuple(int(t) for t in header["query_tokens"])
            raw_items = header["items"]
            flags = header.get("flags", {})
        except (KeyError, TypeError, ValueError) as exc:
            raise DecodeError(f"malformed score request: {exc}", field="query_tokens") from exc
        items = []
        for entry in raw_items:
            kind = entry.get("kind")
            if kind == "cached":
                items.append(CachedRef(item_id=str(entry["item_id"]),
                                       model_version=entry.get("model_version")))
            elif kind == "payload":
                rows = decode_payload(extract_section(body, entry))
                items.append(InlineRows(rows=rows))
            elif kind == "text":
                items.append(InlineText(tokens=tuple(int(t) for t in entry["tokens"])))
            else:
                raise DecodeError(f"unknown item kind {kind!r}", field="items")
        return ScoreRequest(query_tokens=query_tokens, items=items,
                            mode=flags.get("mode", DEFAULT_MODE),
                            request_id=str(header.get("request_id", "")))

    def _encode_response(self, response: ScoreResponse) -> bytes:
        scores = np.array([np.nan if p is None else p for p in response.p_yes])
        payloads = [encode_payload(scores)]
        header = {
            "kind": "score_result",
            "request_id": response.request_id,
            "mode": response.mode,
            "report": response.report,
            "items": [{"ok": e is None} | ({} if e is None else {"error": e})
                      for e in response.errors],
            "scores": payload_spans(payloads)[0],
        }
        return pack_body(header, payloads)


# -- client -----------------------------------------------------------------------------


class Client:
    """Blocking client speaking the framed protocol; one request at a time."""

    def __init__(self, host: str, port: int):
        self.sock = socket.create_connection((host, port))

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def score(self, query_tokens, items, mode: str = DEFAULT_MODE,
              request_id: str = "") -> ScoreResponse:
        payloads: list[bytes] = []
        wire_items = []
        for ref in items:
            if isinstance(ref, CachedRef):
                entry = {"kind": "cached", "item_id": ref.item_id}
                if ref.model_version:
                    entry["model_version"] = ref.model_version
                wire_items.append(entry)
            elif isinstance(ref, InlineRows):
                payloads.append(encode_payload(np.asarray(ref.rows, dtype=np.float64)))
                wire_items.append({"kind": "payload"})
            elif isinstance(ref, InlineText):
                wire_items.append({"kind": "text", "tokens": list(ref.tokens)})
            else:
                raise TypeError(f"unsupported item reference {type(ref).__name__}")
        spans = iter(payload_spans(payloads))
        for entry in wire_items:
            if entry["kind"] == "payload":
                entry.update(next(spans))
        header = {
            "kind": "score",
            "request_id": request_id,
            "query_tokens": [int(t) for t in query_tokens],
            "items": wire_items,
            "flags": {"mode": mode},
        }
        send_frame(self.sock, pack_body(header, payloads))
        body = recv_frame(self.sock)
        if body is None:
            raise ConnectionError("server closed the connection")
        reply = parse_body(body)
        if reply["kind"] == "error":
            raise DecodeError(reply.get("error", "server error"),
                              field=reply.get("field", "request"))
        scores = decode_payload(extract_section(body, reply["scores"]))
        p_yes = [None if np.isnan(v) else float(v) for v in scores]
        errors = [None if item.get("ok") else item.get("error", "item error")
                  for item in reply["items"]]
        return ScoreResponse(request_id=reply.get("request_id", ""), mode=reply["mode"],
                             p_yes=p_yes, errors=errors, report=reply["report"])

    def stats(self, log_limit: int = 200) -> dict:
        send_frame(self.sock, pack_body({"kind": "stats", "log_limit": log_limit}))
        body = recv_frame(self.sock)
        if body is None:
            raise ConnectionError("server closed the connection")
        return parse_body(body)
