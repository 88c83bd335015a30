"""Recall@k / NDCG@k over frozen-index rankings, with comparison tables.

Queries with no relevant chunks are skipped (and counted in metadata)
rather than averaged in as zeros, so label-coverage bugs surface instead of
silently deflating means. Recall is uncapped: hits / |relevant|.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .runs import Qrels
from .store import EmbeddingMatrix, normalize_rows, topk_rows


def recall_at_k(ranking: Sequence[str], relevant: set[str], k: int) -> float:
    """|top-k intersect relevant| / |relevant|."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if not relevant:
        raise ContractError("recall undefined for empty relevant set")
    return len(set(ranking[:k]) & relevant) / len(relevant)


def ndcg_at_k(ranking: Sequence[str], grades: dict[str, int], k: int) -> float:
    """DCG@k / IDCG@k with gain = grade and log2(rank+1) discount."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if not grades:
        raise ContractError("ndcg undefined with no graded chunks")
    dcg = sum(
        grades.get(chunk_id, 0) / math.log2(i + 2)
        for i, chunk_id in enumerate(ranking[:k])
    )
    ideal = sorted(grades.values(), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
    return dcg / idcg


@dataclass
class EvalReport:
    name: str
    k_list: list[int]
    per_query: dict[str, dict[str, float]]  # metric -> qid -> value
    means: dict[str, float]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "k_list": self.k_list,
                "per_query": self.per_query,
                "means": self.means,
                "metadata": self.metadata,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            name=raw["name"],
            k_list=list(raw["k_list"]),
            per_query=raw["per_query"],
            means=raw["means"],
            metadata=raw.get("metadata", {}),
        )


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def rank_queries(
    head,
    query_embs: EmbeddingMatrix,
    doc_store: EmbeddingMatrix,
    depth: int,
) -> dict[str, list[str]]:
    """Ranked doc-id lists per query, optionally through an adapter head.

    No head means base-model semantics: the raw query embedding, normalized.
    Head outputs are re-normalized to preserve the cosine contract.
    """
    if query_embs.dim != doc_store.dim:
        raise ContractError(
            f"dim mismatch: queries {query_embs.dim} vs docs {doc_store.dim}"
        )
    x = query_embs.data.astype(np.float64)
    if head is not None:
        x = head.forward(x)
    x = normalize_rows(x).astype(np.float64)
    scores = x @ doc_store.data.astype(np.float64).T
    doc_ids = np.array(doc_store.ids)
    out: dict[str, list[str]] = {}
    for qi, qid in enumerate(query_embs.ids):
        out[qid] = [str(doc_ids[i]) for i, _ in topk_rows(scores[qi], doc_ids, depth)]
    return out


def evaluate(
    head,
    query_embs: EmbeddingMatrix,
    doc_store: EmbeddingMatrix,
    qrels: Qrels,
    k_list: Sequence[int] = (10,),
    name: str = "run",
) -> EvalReport:
    """Retrieve and score every query with labels; aggregate by mean."""
    k_list = sorted(set(int(k) for k in k_list))
    if not k_list or k_list[0] < 1:
        raise ContractError(f"bad k list {k_list}")
    rankings = rank_queries(head, query_embs, doc_store, depth=max(k_list))
    per_query: dict[str, dict[str, float]] = {}
    for k in k_list:
        per_query[f"recall@{k}"] = {}
        per_query[f"ndcg@{k}"] = {}
    skipped = 0
    for qid in query_embs.ids:
        grades = qrels.get(qid, {})
        if not grades:
            skipped += 1
            continue
        ranking = rankings[qid]
        for k in k_list:
            per_query[f"recall@{k}"][qid] = recall_at_k(ranking, set(grades), k)
            per_query[f"ndcg@{k}"][qid] = ndcg_at_k(ranking, grades, k)
    # sum in sorted-qid order so means are identical under query permutation
    means = {
        metric: (
            math.fsum(vals[q] for q in sorted(vals)) / len(vals) if vals else float("nan")
        )
        for metric, vals in per_query.items()
    }
    return EvalReport(
        name=name,
        k_list=list(k_list),
        per_query=per_query,
        means=means,
        metadata={
            "queries_evaluated": len(query_embs.ids) - skipped,
            "queries_skipped": skipped,
            "head": getattr(head, "describe", lambda: "none")(),
        },
    )


def _metric_sort_key(metric: str) -> tuple[str, int]:
    name, _, k = metric.partition("@")
    return (name, int(k) if k.isdigit() else 0)


def _fmt(v: float) -> str:
    s = f"{v:.4f}".rstrip("0").rstrip(".")
    return s if s else "0"


def compare_report(reports: list[EvalReport]) -> tuple[str, str]:
    """Render named reports as (TSV, Markdown) tables, rows sorted by name."""
    if not reports:
        raise ContractError("no reports to compare")
    metrics = sorted(reports[0].means, key=_metric_sort_key)
    for r in reports[1:]:
        if sorted(r.means, key=_metric_sort_key) != metrics:
            raise ContractError(
                f"metric sets differ: {metrics} vs {sorted(r.means)} in {r.name}"
            )
    rows = sorted(reports, key=lambda r: r.name)
    tsv_lines = ["variant\t" + "\t".join(metrics)]
    md_lines = [
        "| variant | " + " | ".join(metrics) + " |",
        "|" + "---|" * (len(metrics) + 1),
    ]
    for r in rows:
        vals = [_fmt(r.means[m]) for m in metrics]
        tsv_lines.append(r.name + "\t" + "\t".join(vals))
        md_lines.append("| " + r.name + " | " + " | ".join(vals) + " |")
    return "\n".join(tsv_lines) + "\n", "\n".join(md_lines) + "\n"
