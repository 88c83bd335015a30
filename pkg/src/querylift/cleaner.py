"""Multi-stage query-log cleaning.

Stages run in a fixed order: word-count percentile filter, language filter,
exact dedup, and optional clustering-based diversity selection. Each stage
returns a subset of its input with order preserved, except diversity
selection which re-sorts by query id.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, FormatError
from .store import EmbeddingMatrix

log = logging.getLogger(__name__)

_WORD_RE = re.compile(r"\S+")
_TOKEN_RE = re.compile(r"[a-z']+")

# Compact English function-word list for the stopword-ratio heuristic.
ENGLISH_STOPWORDS = frozenset(
    """a an the and or but if then is are was were be been being am do does did
    doing have has had having i you he she it we they me him her us them my your
    his its our their this that these those there here what which who whom whose
    how why when where to of in on at by for with about into over after before
    under again not no nor so than too very can will just should could would may
    might must shall from as most other some such only own same s t don now""".split()
)

STOPWORD_RATIO_THRESHOLD = 0.15


@dataclass
class QueryRecord:
    id: str
    text: str
    word_count: int = field(init=False)
    split: str = "unassigned"  # train | test | unassigned

    def __post_init__(self) -> None:
        self.word_count = len(_WORD_RE.findall(self.text))
        if self.split not in ("train", "test", "unassigned"):
            raise ContractError(f"bad split {self.split!r}")


def stopword_ratio(text: str) -> float:
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        return 0.0
    return sum(t in ENGLISH_STOPWORDS for t in tokens) / len(tokens)


def default_detector(text: str) -> str:
    """Stopword-ratio heuristic: 'en' at ratio >= 0.15, else 'und'."""
    return "en" if stopword_ratio(text) >= STOPWORD_RATIO_THRESHOLD else "und"


def _nearest_rank(sorted_counts: list[int], pct: float) -> int:
    """Nearest-rank percentile over an already-sorted list (pct in (0, 1])."""
    rank = math.ceil(pct * len(sorted_counts))
    return sorted_counts[max(rank, 1) - 1]


def length_filter(
    queries: list[QueryRecord], lower_pct: float = 0.25, upper_pct: float = 0.25
) -> list[QueryRecord]:
    """Drop queries at or outside the nearest-rank length percentiles.

    Keeps word counts strictly above the lower-percentile value and strictly
    below the upper one; a bound of 0 disables that side entirely. With all
    counts equal and both bounds active, everything is dropped (the strict
    rule's documented degenerate case).
    """
    if not (0 <= lower_pct < 1 - upper_pct <= 1):
        raise ContractError(
            f"need 0 <= lower_pct < 1 - upper_pct <= 1, got {lower_pct}/{upper_pct}"
        )
    if not queries:
        return []
    counts = sorted(q.word_count for q in queries)
    lo = _nearest_rank(counts, lower_pct) if lower_pct > 0 else None
    hi = _nearest_rank(counts, 1 - upper_pct) if upper_pct > 0 else None
    out = []
    for q in queries:
        if lo is not None and q.word_count <= lo:
            continue
        if hi is not None and q.word_count >= hi:
            continue
        out.append(q)
    return out


def language_filter(
    queries: list[QueryRecord],
    detector: Callable[[str], str] = default_detector,
    keep: str = "en",
) -> list[QueryRecord]:
    """Keep queries the detector labels `keep`; detector failures fail open."""
    out = []
    for q in queries:
        try:
            lang = detector(q.text)
        except Exception:
            log.warning("language detector failed on query %s; keeping it", q.id)
            out.append(q)
            continue
        if lang == keep:
            out.append(q)
    return out


def dedup(queries: list[QueryRecord]) -> list[QueryRecord]:
    """Drop byte-exact text duplicates, keeping the first occurrence."""
    seen: set[str] = set()
    out = []
    for q in queries:
        if q.text in seen:
            continue
        seen.add(q.text)
        out.append(q)
    return out


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((data - data[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # all remaining points coincide with a centroid; pick any unchosen
            remaining = sorted(set(range(n)) - set(chosen))
            chosen.append(remaining[int(rng.integers(len(remaining)))])
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
            chosen.append(idx)
        d2 = np.minimum(d2, np.sum((data - data[chosen[-1]]) ** 2, axis=1))
    return data[chosen].copy()


def _kmeans(
    data: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-4
) -> np.ndarray:
    """Lloyd's algorithm, k-means++ init, stopping on max centroid movement."""
    centroids = _kmeans_pp_init(data, k, rng)
    assign = np.zeros(data.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        moved = 0.0
        for c in range(k):
            members = data[assign == c]
            if len(members) == 0:
                continue  # empty cluster keeps its previous centroid
            new = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new - centroids[c])))
            centroids[c] = new
        if moved < tol:
            break
    return centroids


def diversity_select(
    queries: list[QueryRecord],
    embeddings: EmbeddingMatrix,
    k: int,
    seed: int,
) -> list[QueryRecord]:
    """Cluster query embeddings into k groups; emit each cluster's medoid.

    Embedding rows must align with `queries` by position. Output is sorted
    by query id. Duplicate embeddings can leave a cluster empty, in which
    case fewer than k queries come back.
    """
    if k > len(queries):
        raise ContractError(f"k={k} exceeds query count {len(queries)}")
    if embeddings.count != len(queries):
        raise ContractError(
            f"embedding rows {embeddings.count} != query count {len(queries)}"
        )
    if k < 1:
        raise ContractError("k must be >= 1")
    data = embeddings.data.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeans(data, k, rng)
    d2 = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    picked: list[QueryRecord] = []
    for c in range(k):
        members = np.flatnonzero(assign == c)
        if members.size == 0:
            continue
        best = members[int(np.argmin(d2[members, c]))]
        picked.append(queries[int(best)])
    return sorted(picked, key=lambda q: q.id)


@dataclass
class CleanReport:
    """Per-stage input/output sizes, rendered as a TSV summary."""

    stages: list[tuple[str, int, int]] = field(default_factory=list)

    def record(self, stage: str, before: int, after: int) -> None:
        self.stages.append((stage, before, after))

    def to_tsv(self) -> str:
        lines = ["stage\tin\tout\tdropped"]
        for stage, before, after in self.stages:
            lines.append(f"{stage}\t{before}\t{after}\t{before - after}")
        return "\n".join(lines) + "\n"


def clean_queries(
    queries: list[QueryRecord],
    lower_pct: float = 0.25,
    upper_pct: float = 0.25,
    detector: Callable[[str], str] = default_detector,
) -> tuple[list[QueryRecord], CleanReport]:
    """Run length, language, and dedup stages in order."""
    report = CleanReport()
    out = length_filter(queries, lower_pct, upper_pct)
    report.record("length_filter", len(queries), len(out))
    before = len(out)
    out = language_filter(out, detector)
    report.record("language_filter", before, len(out))
    before = len(out)
    out = dedup(out)
    report.record("dedup", before, len(out))
    return out, report


def read_queries(path: str | Path) -> list[QueryRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    QueryRecord(
                        id=str(rec["id"]),
                        text=str(rec["text"]),
                        split=str(rec.get("split", "unassigned")),
                    )
                )
            except (json.JSONDecodeError, KeyError) as e:
                raise FormatError(f"{path}: line {n}: bad query record") from e
    return out


def write_queries(queries: Iterable[QueryRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for q in queries:
            rec = {"id": q.id, "text": q.text}
            if q.split != "unassigned":
                rec["split"] = q.split
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
