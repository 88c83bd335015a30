"""Union pooling of multi-retriever runs, plus retriever-contribution analyses.

The candidate pool for a query is exactly the union of every run's
depth-truncated list, with provenance (which retrievers surfaced the chunk,
at what rank) retained so judging and the analyses never re-run retrieval.

Recall here is the uncapped convention, hits / |relevant|, expressed as a
percentage; queries without relevant chunks are excluded from means.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractError, FormatError
from .runs import Qrels, RunRanking


@dataclass
class CandidatePool:
    """query id -> chunk id -> sorted list of (retriever, rank) contributors."""

    entries: dict[str, dict[str, list[tuple[str, int]]]] = field(default_factory=dict)

    def query_ids(self) -> list[str]:
        return sorted(self.entries)

    def candidates(self, qid: str) -> list[str]:
        return sorted(self.entries.get(qid, {}))

    def pairs(self) -> list[tuple[str, str]]:
        return [(q, c) for q in self.query_ids() for c in self.candidates(q)]

    def size(self, qid: str) -> int:
        return len(self.entries.get(qid, {}))


def build_pool(runs: list[RunRanking], depth: int) -> CandidatePool:
    """Union of depth-truncated runs; all runs must cover the same queries."""
    if not runs:
        raise ContractError("no runs to pool")
    if depth < 1:
        raise ContractError("depth must be >= 1")
    query_sets = [run.query_ids() for run in runs]
    universe = set().union(*query_sets)
    for run, qs in zip(runs, query_sets):
        missing = sorted(universe - qs)
        if missing:
            raise ContractError(
                f"run {run.retriever} is missing queries {missing[:5]}"
                + ("..." if len(missing) > 5 else "")
            )
    pool = CandidatePool()
    for run in runs:
        for qid in run.results:
            per_query = pool.entries.setdefault(qid, {})
            for rank, (chunk_id, _) in enumerate(run.top(qid, depth), start=1):
                per_query.setdefault(chunk_id, []).append((run.retriever, rank))
    for per_query in pool.entries.values():
        for contributors in per_query.values():
            contributors.sort()
    return pool


def _mean_recall_pct(hits_by_query: dict[str, float]) -> float:
    if not hits_by_query:
        raise ContractError("no queries with relevant chunks to average over")
    return 100.0 * math.fsum(hits_by_query[q] for q in sorted(hits_by_query)) / len(hits_by_query)


def _recall_of_sets(candidate_sets: dict[str, set[str]], qrels: Qrels) -> float:
    per_query = {}
    for qid, relevant in qrels.items():
        if not relevant:
            continue
        found = candidate_sets.get(qid, set())
        per_query[qid] = len(found & set(relevant)) / len(relevant)
    return _mean_recall_pct(per_query)


def individual_recall(run: RunRanking, qrels: Qrels, depth: int = 420) -> float:
    """Mean percentage of each query's relevant chunks inside the run's top-depth."""
    if not qrels:
        raise ContractError("empty qrels")
    sets = {qid: {c for c, _ in run.top(qid, depth)} for qid in qrels}
    return _recall_of_sets(sets, qrels)


def union_recall(runs: list[RunRanking], qrels: Qrels, depth: int = 420) -> float:
    """Recall of the pooled union of all runs."""
    if not qrels:
        raise ContractError("empty qrels")
    sets: dict[str, set[str]] = {}
    for qid in qrels:
        sets[qid] = set()
        for run in runs:
            sets[qid] |= {c for c, _ in run.top(qid, depth)}
    return _recall_of_sets(sets, qrels)


def leave_one_out(runs: list[RunRanking], qrels: Qrels, depth: int = 420) -> dict[str, float]:
    """For each retriever, recall of the union of all the other runs."""
    if len(runs) < 2:
        raise ContractError("leave-one-out needs at least two runs")
    out = {}
    for i, left_out in enumerate(runs):
        rest = runs[:i] + runs[i + 1 :]
        out[left_out.retriever] = union_recall(rest, qrels, depth)
    return out


def sample_for_validation(
    qrels: Qrels,
    fraction: float,
    seed: int,
    query_texts: dict[str, str],
    chunk_texts: dict[str, str],
) -> list[dict]:
    """Seeded uniform sample of ceil(fraction * |queries|) labeled queries,
    exported with texts inlined for human review."""
    if not 0 < fraction <= 1:
        raise ContractError(f"fraction must be in (0, 1], got {fraction}")
    qids = sorted(qrels)
    n = math.ceil(fraction * len(qids))
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(qids), size=n, replace=False).tolist())
    rows = []
    for qi in picked:
        qid = qids[qi]
        for chunk_id in sorted(qrels[qid]):
            rows.append(
                {
                    "query_id": qid,
                    "query": query_texts.get(qid, ""),
                    "chunk_id": chunk_id,
                    "chunk": chunk_texts.get(chunk_id, ""),
                    "label": qrels[qid][chunk_id],
                }
            )
    return rows


def write_pool(pool: CandidatePool, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in pool.query_ids():
            for chunk_id in pool.candidates(qid):
                contributors = [
                    {"retriever": r, "rank": rank}
                    for r, rank in pool.entries[qid][chunk_id]
                ]
                f.write(
                    json.dumps(
                        {"query_id": qid, "chunk_id": chunk_id, "contributors": contributors},
                        ensure_ascii=False,
                    )
                    + "\n"
                )


def read_pool(path: str | Path) -> CandidatePool:
    pool = CandidatePool()
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                contributors = [
                    (str(c["retriever"]), int(c["rank"])) for c in rec["contributors"]
                ]
                pool.entries.setdefault(str(rec["query_id"]), {})[str(rec["chunk_id"])] = contributors
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}: line {n}: bad pool record") from e
    return pool


def contribution_tables(
    runs: list[RunRanking], qrels: Qrels, depth: int = 420
) -> tuple[str, str]:
    """(individual-recall TSV, leave-one-out TSV), rows sorted by recall desc."""
    individual = sorted(
        ((run.retriever, individual_recall(run, qrels, depth)) for run in runs),
        key=lambda t: (-t[1], t[0]),
    )
    loo = sorted(leave_one_out(runs, qrels, depth).items(), key=lambda t: (t[1], t[0]))
    ind_tsv = "retriever\trecall\n" + "".join(f"{r}\t{v:.2f}\n" for r, v in individual)
    loo_tsv = "left_out\trecall\n" + "".join(f"{r}\t{v:.2f}\n" for r, v in loo)
    return ind_tsv, loo_tsv
