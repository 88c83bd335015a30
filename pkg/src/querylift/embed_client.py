"""HTTP client for external embedding services, with batching and a disk cache.

One wire contract covers every provider: POST {"model", "input": [...]} and
read back {"data": [{"index", "embedding"}]}. Rows are L2-normalized on
receipt so the frozen-index cosine contract holds regardless of provider
behavior. The cache is keyed by (model, sha256 of text), which makes corpus
re-embedding after an interrupt, and re-chunking that leaves most chunks
untouched, nearly free.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import requests

from .errors import ContractError, CredentialError, FormatError, TransportError
from .store import EmbeddingMatrix, ids_sidecar, normalize_rows

# transport: (url, json payload, headers) -> (status code, parsed body)
Transport = Callable[[str, dict, dict], tuple[int, dict]]

_BACKOFF_SECONDS = (1.0, 2.0, 4.0)


@dataclass(frozen=True)
class EmbedderSpec:
    name: str
    endpoint: str
    model: str
    dim: int
    max_batch: int = 64
    auth_env_var: str = ""
    query_prefix: str = ""
    doc_prefix: str = ""

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise ContractError(f"embedder {self.name}: dim must be positive")
        if self.max_batch < 1:
            raise ContractError(f"embedder {self.name}: max_batch must be >= 1")


def load_spec(path: str | Path) -> EmbedderSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return EmbedderSpec(**raw)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise FormatError(f"{path}: bad embedder spec: {e}") from e


def prefixed(spec: EmbedderSpec, text: str, kind: str) -> str:
    """Apply the spec's instruction prefix for 'doc' or 'query' inputs."""
    if kind == "doc":
        return spec.doc_prefix + text
    if kind == "query":
        return spec.query_prefix + text
    raise ContractError(f"unknown text kind {kind!r}")


def _requests_transport(url: str, payload: dict, headers: dict) -> tuple[int, dict]:
    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=120)
    except requests.RequestException as e:
        raise ConnectionError(str(e)) from e
    try:
        body = resp.json()
    except ValueError:
        body = {}
    return resp.status_code, body


class DiskCache:
    """<root>/<model>/<hash[:2]>/<hash> files holding raw float32 payloads."""

    def __init__(self, root: str | Path, model: str, dim: int):
        safe = re.sub(r"[^A-Za-z0-9._-]", "_", model)
        self.dir = Path(root) / safe
        self.dim = dim
        self._lock = threading.Lock()

    @staticmethod
    def key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.dir / key[:2] / key

    def get(self, text: str) -> np.ndarray | None:
        path = self._path(self.key(text))
        if not path.exists():
            return None
        blob = path.read_bytes()
        if len(blob) != self.dim * 4:
            return None  # stale entry from another dim; treat as a miss
        return np.frombuffer(blob, dtype="<f4").copy()

    def put(self, text: str, row: np.ndarray) -> None:
        key = self.key(text)
        path = self._path(key)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(np.ascontiguousarray(row, dtype="<f4").tobytes())
            tmp.replace(path)


class EmbeddingClient:
    """Batched, cached, retrying client for one embedding service."""

    def __init__(
        self,
        spec: EmbedderSpec,
        cache_dir: str | Path | None = None,
        transport: Transport | None = None,
        concurrency: int = 4,
        sleep: Callable[[float], None] | None = None,
    ):
        self.spec = spec
        self.cache = DiskCache(cache_dir, spec.model, spec.dim) if cache_dir else None
        self.transport = transport or _requests_transport
        self.concurrency = max(1, concurrency)
        self.sleep = sleep if sleep is not None else time.sleep
        self.requests_made = 0
        self._stats_lock = threading.Lock()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.spec.auth_env_var:
            key = os.environ.get(self.spec.auth_env_var)
            if not key:
                raise CredentialError(
                    f"environment variable {self.spec.auth_env_var} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post_batch(self, batch: list[str]) -> np.ndarray:
        """One wire round trip with retries; returns normalized (n, dim) rows."""
        payload = {"model": self.spec.model, "input": batch}
        headers = self._headers()
        last_error = "no attempt made"
        for attempt in range(1 + len(_BACKOFF_SECONDS)):
            if attempt > 0:
                self.sleep(_BACKOFF_SECONDS[attempt - 1])
            with self._stats_lock:
                self.requests_made += 1
            try:
                status, body = self.transport(self.spec.endpoint, payload, headers)
            except ConnectionError as e:
                last_error = f"connection failed: {e}"
                continue
            if status in (401, 403):
                raise CredentialError(
                    f"embedder {self.spec.name} rejected credentials "
                    f"(check {self.spec.auth_env_var or 'service configuration'})"
                )
            if status >= 500:
                last_error = f"server error {status}"
                continue
            if status != 200:
                raise TransportError(
                    f"embedder {self.spec.name} returned status {status}"
                )
            return self._parse_rows(body, len(batch))
        raise TransportError(
            f"embedder {self.spec.name} unreachable after "
            f"{1 + len(_BACKOFF_SECONDS)} attempts: {last_error}"
        )

    def _parse_rows(self, body: dict, expected: int) -> np.ndarray:
        data = body.get("data")
        if not isinstance(data, list) or len(data) != expected:
            raise FormatError(
                f"embedder {self.spec.name}: response has "
                f"{len(data) if isinstance(data, list) else 'no'} rows, expected {expected}"
            )
        rows = np.zeros((expected, self.spec.dim), dtype=np.float64)
        seen = set()
        for item in data:
            idx = item.get("index")
            emb = item.get("embedding")
            if not isinstance(idx, int) or idx in seen or not 0 <= idx < expected:
                raise FormatError(f"embedder {self.spec.name}: bad result index {idx!r}")
            seen.add(idx)
            if not isinstance(emb, list) or len(emb) != self.spec.dim:
                raise ContractError(
                    f"embedder {self.spec.name}: got dim "
                    f"{len(emb) if isinstance(emb, list) else '?'}, spec says {self.spec.dim}"
                )
            rows[idx] = emb
        return normalize_rows(rows)

    def embed_texts(self, texts: list[str]) -> EmbeddingMatrix:
        """Embed texts in order; rows are unit-norm float32.

        Cache hits never touch the network; repeated texts are requested
        once. Row ids are the positional indices.
        """
        out = np.zeros((len(texts), self.spec.dim), dtype=np.float32)
        misses: dict[str, list[int]] = {}
        for i, text in enumerate(texts):
            cached = self.cache.get(text) if self.cache else None
            if cached is not None:
                out[i] = cached
            else:
                misses.setdefault(text, []).append(i)

        unique = sorted(misses)  # deterministic request composition
        batches = [
            unique[b : b + self.spec.max_batch]
            for b in range(0, len(unique), self.spec.max_batch)
        ]

        def handle(batch: list[str]) -> list[tuple[str, np.ndarray]]:
            rows = self._post_batch(batch)
            return list(zip(batch, rows))

        if len(batches) > 1 and self.concurrency > 1:
            with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
                results = list(pool.map(handle, batches))
        else:
            results = [handle(b) for b in batches]

        for batch_result in results:
            for text, row in batch_result:
                row32 = row.astype(np.float32)
                if self.cache:
                    self.cache.put(text, row32)
                for i in misses[text]:
                    out[i] = row32
        return EmbeddingMatrix([str(i) for i in range(len(texts))], out)

    def embed_stream(
        self, records: Iterable[tuple[str, str]], out_path: str | Path
    ) -> int:
        """Stream (id, text) records into an .emb file plus its id sidecar.

        Processes max_batch-sized groups, so memory stays bounded and an
        interrupted run re-embeds only what the cache does not already hold.
        """
        out_path = Path(out_path)
        writer = _EmbWriter(out_path, self.spec.dim)
        group: list[tuple[str, str]] = []
        try:
            for rec in records:
                group.append(rec)
                if len(group) >= self.spec.max_batch:
                    self._flush_group(group, writer)
                    group = []
            if group:
                self._flush_group(group, writer)
        finally:
            writer.close()
        return writer.count

    def _flush_group(self, group: list[tuple[str, str]], writer: "_EmbWriter") -> None:
        matrix = self.embed_texts([text for _, text in group])
        for (id_, _), row in zip(group, matrix.data):
            writer.append(id_, row)


class _EmbWriter:
    """Incremental .emb writer; patches the row count into the header on close."""

    def __init__(self, path: Path, dim: int):
        self.path = path
        self.dim = dim
        self.count = 0
        self._ids_seen: set[str] = set()
        self._f = open(path, "wb")
        self._f.write(b"EMB1")
        self._f.write(np.array(dim, dtype="<u4").tobytes())
        self._f.write(np.array(0, dtype="<u8").tobytes())
        self._ids = open(ids_sidecar(path), "w", encoding="utf-8")

    def append(self, id_: str, row: np.ndarray) -> None:
        if id_ in self._ids_seen:
            raise ContractError(f"duplicate id in embedding stream: {id_}")
        self._ids_seen.add(id_)
        self._f.write(np.ascontiguousarray(row, dtype="<f4").tobytes())
        self._ids.write(json.dumps({"row": self.count, "id": id_}, ensure_ascii=False) + "\n")
        self.count += 1

    def close(self) -> None:
        self._f.seek(8)
        self._f.write(np.array(self.count, dtype="<u8").tobytes())
        self._f.close()
        self._ids.close()
