"""Frozen embedding matrices: persistence, normalization, exact top-k search.

An EmbeddingMatrix is the unit of exchange for every dense artifact in the
pipeline: the frozen document index, raw query embeddings, and adapted query
embeddings all use the same container and the same `.emb` disk format.

Similarity is cosine realized as a dot product over L2-normalized rows.
Search is exact brute force; scores accumulate in float64 so that rankings
are stable, and ties are broken by ascending id so results do not depend on
storage order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, StorageError

MAGIC = b"EMB1"
_HEADER_LEN = len(MAGIC) + 4 + 8  # magic + u32 dim + u64 count


@dataclass
class EmbeddingMatrix:
    """Dense row-major float32 matrix with a stable row <-> id mapping."""

    ids: list[str]
    data: np.ndarray  # (count, dim) float32, read-only

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise ContractError(f"embedding data must be 2-D, got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if len(self.ids) != self.data.shape[0]:
            raise ContractError(
                f"id count {len(self.ids)} != row count {self.data.shape[0]}"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("embedding ids are not unique")
        self.data.setflags(write=False)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row(self, id_: str) -> np.ndarray:
        return self.data[self.row_index(id_)]

    def row_index(self, id_: str) -> int:
        if not hasattr(self, "_index"):
            self._index = {i: n for n, i in enumerate(self.ids)}
        return self._index[id_]

    def normalized(self) -> "EmbeddingMatrix":
        """Return a copy with unit-norm rows. Zero rows are rejected."""
        return EmbeddingMatrix(list(self.ids), normalize_rows(self.data))

    def is_normalized(self, tol: float = 1e-5) -> bool:
        if self.count == 0:
            return True
        norms = np.linalg.norm(self.data.astype(np.float64), axis=1)
        return bool(np.max(np.abs(norms - 1.0)) <= tol)


@dataclass(frozen=True)
class SearchHit:
    id: str
    score: float
    rank: int  # 1-based


def normalize_rows(data: np.ndarray) -> np.ndarray:
    """L2-normalize rows in float64, returning float32. Rejects zero rows."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.shape[0] == 0:
        return np.zeros(arr.shape, dtype=np.float32)
    norms = np.linalg.norm(arr, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ContractError(f"cannot normalize zero vector at row {int(zero[0])}")
    return np.ascontiguousarray(arr / norms[:, None], dtype=np.float32)


def save_matrix(m: EmbeddingMatrix, path: str | Path) -> None:
    """Write `path` (.emb binary) and `path`.ids.jsonl sidecar.

    Layout: b"EMB1", dim as u32 LE, count as u64 LE, then the raw row-major
    float32 LE payload.
    """
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(np.array(m.dim, dtype="<u4").tobytes())
            f.write(np.array(m.count, dtype="<u8").tobytes())
            f.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
        with open(ids_sidecar(path), "w", encoding="utf-8") as f:
            for n, id_ in enumerate(m.ids):
                f.write(json.dumps({"row": n, "id": id_}, ensure_ascii=False) + "\n")
    except OSError as e:
        raise StorageError(f"cannot write embedding matrix to {path}: {e}") from e


def load_matrix(path: str | Path) -> EmbeddingMatrix:
    """Load a matrix saved by save_matrix, validating every header field."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read embedding matrix from {path}: {e}") from e
    if len(blob) < _HEADER_LEN:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    dim = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    count = int(np.frombuffer(blob, dtype="<u8", count=1, offset=8)[0])
    if dim <= 0:
        raise FormatError(f"{path}: non-positive dim {dim}")
    payload = blob[_HEADER_LEN:]
    expected = count * dim * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload length {len(payload)} != count*dim*4 = {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim)

    ids_path = ids_sidecar(path)
    try:
        lines = ids_path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise StorageError(f"cannot read id sidecar {ids_path}: {e}") from e
    ids: list[str] = []
    for n, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{ids_path}: line {n + 1}: invalid JSON") from e
        if rec.get("row") != len(ids):
            raise FormatError(f"{ids_path}: line {n + 1}: rows out of order")
        ids.append(str(rec["id"]))
    if len(ids) != count:
        raise FormatError(f"{ids_path}: {len(ids)} ids for {count} rows")
    if len(set(ids)) != len(ids):
        raise FormatError(f"{ids_path}: duplicate ids")
    return EmbeddingMatrix(ids, data.copy())


def ids_sidecar(path: str | Path) -> Path:
    return Path(str(path) + ".ids.jsonl")


def topk_rows(scores: np.ndarray, ids: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top-k (row, score) for one query's score vector, ties by ascending id."""
    # lexsort: last key is primary; -scores ascending == scores descending
    order = np.lexsort((ids, -scores))[: min(k, scores.shape[0])]
    return [(int(i), float(scores[i])) for i in order]


def top_k(
    queries: EmbeddingMatrix, docs: EmbeddingMatrix, k: int
) -> list[list[SearchHit]]:
    """Exact top-k by dot product (cosine over unit-norm rows).

    Deterministic: scores accumulate in float64 and exact ties are resolved
    by ascending id lexicographic order. Returns one hit list per query, in
    query row order.
    """
    if queries.dim != docs.dim:
        raise ContractError(f"dim mismatch: queries {queries.dim} vs docs {docs.dim}")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if queries.count == 0:
        return []
    if docs.count == 0:
        return [[] for _ in range(queries.count)]
    scores = queries.data.astype(np.float64) @ docs.data.astype(np.float64).T
    doc_ids = np.array(docs.ids)
    out: list[list[SearchHit]] = []
    for q in range(queries.count):
        hits = [
            SearchHit(id=str(doc_ids[i]), score=s, rank=r + 1)
            for r, (i, s) in enumerate(topk_rows(scores[q], doc_ids, k))
        ]
        out.append(hits)
    return out
