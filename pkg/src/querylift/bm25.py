"""BM25 inverted index, the ensemble's lexical retriever.

Scoring: score(q, d) = sum over query terms t of
    idf(t) * tf / (tf + k1 * (1 - b + b * len(d) / avg_len))
with idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1). The +1 inside the log
keeps idf positive for terms appearing in most documents, so scores are
always >= 0. No stemming, no stopwords: recall is this retriever's job,
downstream pooling and judging handle precision.
"""

from __future__ import annotations

import gzip
import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .chunker import ChunkRecord
from .errors import ContractError, FormatError
from .store import SearchHit

# maximal alphanumeric runs (unicode letters/digits, underscore excluded)
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Bm25Index:
    n_docs: int
    avg_doc_len: float
    doc_lengths: dict[str, int]
    doc_freq: dict[str, int]
    postings: dict[str, list[tuple[str, int]]]  # term -> [(chunk id, tf)]
    k1: float = 1.2
    b: float = 0.75


def build_index(chunks: Iterable[ChunkRecord], k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    doc_lengths: dict[str, int] = {}
    doc_freq: Counter = Counter()
    postings: dict[str, list[tuple[str, int]]] = {}
    for chunk in chunks:
        tokens = tokenize(chunk.text)
        doc_lengths[chunk.id] = len(tokens)
        for term, tf in sorted(Counter(tokens).items()):
            doc_freq[term] += 1
            postings.setdefault(term, []).append((chunk.id, tf))
    if not doc_lengths:
        raise ContractError("cannot build a BM25 index from an empty corpus")
    avg = sum(doc_lengths.values()) / len(doc_lengths)
    return Bm25Index(
        n_docs=len(doc_lengths),
        avg_doc_len=avg,
        doc_lengths=doc_lengths,
        doc_freq=dict(doc_freq),
        postings=postings,
        k1=k1,
        b=b,
    )


def idf(index: Bm25Index, term: str) -> float:
    df = index.doc_freq.get(term, 0)
    return math.log((index.n_docs - df + 0.5) / (df + 0.5) + 1.0)


def bm25_search(index: Bm25Index, query: str, k: int) -> list[SearchHit]:
    """Top-k chunks by BM25 score; ties broken by ascending chunk id.

    Only chunks containing at least one query term are scored, so a fully
    out-of-vocabulary query returns an empty list.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    scores: dict[str, float] = {}
    for term in tokenize(query):
        if term not in index.postings:
            continue
        term_idf = idf(index, term)
        for chunk_id, tf in index.postings[term]:
            norm = index.k1 * (1.0 - index.b + index.b * index.doc_lengths[chunk_id] / index.avg_doc_len)
            scores[chunk_id] = scores.get(chunk_id, 0.0) + term_idf * tf / (tf + norm)
    ranked = sorted(scores.items(), key=lambda t: (-t[1], t[0]))[:k]
    return [SearchHit(id=i, score=s, rank=r + 1) for r, (i, s) in enumerate(ranked)]


def save_index(index: Bm25Index, path: str | Path) -> None:
    payload = {
        "format": "bm25-v1",
        "n_docs": index.n_docs,
        "avg_doc_len": index.avg_doc_len,
        "k1": index.k1,
        "b": index.b,
        "doc_lengths": index.doc_lengths,
        "doc_freq": index.doc_freq,
        "postings": {t: [[i, f] for i, f in ps] for t, ps in index.postings.items()},
    }
    # filename and mtime pinned so re-runs produce byte-identical index files
    with open(path, "wb") as raw:
        with gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as f:
            f.write(json.dumps(payload, sort_keys=True).encode("utf-8"))


def load_index(path: str | Path) -> Bm25Index:
    try:
        with gzip.open(path, "rt", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: not a BM25 index file: {e}") from e
    if payload.get("format") != "bm25-v1":
        raise FormatError(f"{path}: unknown index format {payload.get('format')!r}")
    return Bm25Index(
        n_docs=int(payload["n_docs"]),
        avg_doc_len=float(payload["avg_doc_len"]),
        doc_lengths={str(k): int(v) for k, v in payload["doc_lengths"].items()},
        doc_freq={str(k): int(v) for k, v in payload["doc_freq"].items()},
        postings={
            str(t): [(str(i), int(f)) for i, f in ps]
            for t, ps in payload["postings"].items()
        },
        k1=float(payload["k1"]),
        b=float(payload["b"]),
    )
