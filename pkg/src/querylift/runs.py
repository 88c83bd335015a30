"""Ranked-run and relevance-label interchange in TREC text formats.

Runs: `qid Q0 docid rank score tag`, one line per hit, ranks 1-based.
Qrels: `qid 0 docid rel`; only positive grades are stored, absence means
non-relevant.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError, FormatError
from .store import SearchHit

Qrels = dict[str, dict[str, int]]  # query id -> chunk id -> grade >= 1


@dataclass
class RunRanking:
    """Per-query ordered (chunk id, score) lists from one retriever."""

    retriever: str
    results: dict[str, list[tuple[str, float]]]

    def __post_init__(self) -> None:
        for qid, hits in self.results.items():
            ids = [i for i, _ in hits]
            if len(set(ids)) != len(ids):
                raise ContractError(f"run {self.retriever}: duplicate ids for query {qid}")
            scores = [s for _, s in hits]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise ContractError(
                    f"run {self.retriever}: scores increase within query {qid}"
                )

    def query_ids(self) -> set[str]:
        return set(self.results)

    def top(self, qid: str, depth: int) -> list[tuple[str, float]]:
        return self.results.get(qid, [])[:depth]


def run_from_hits(retriever: str, hits_by_query: dict[str, list[SearchHit]]) -> RunRanking:
    return RunRanking(
        retriever=retriever,
        results={qid: [(h.id, h.score) for h in hits] for qid, hits in hits_by_query.items()},
    )


def write_run(run: RunRanking, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(run.results):
            for rank, (chunk_id, score) in enumerate(run.results[qid], start=1):
                f.write(f"{qid} Q0 {chunk_id} {rank} {score:.6f} {run.retriever}\n")


def read_run(path: str | Path) -> RunRanking:
    results: dict[str, list[tuple[str, float]]] = {}
    tag = ""
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise FormatError(f"{path}: line {n}: expected 6 fields, got {len(parts)}")
            qid, _, chunk_id, rank, score, tag = parts
            results.setdefault(qid, []).append((chunk_id, float(score)))
            if int(rank) != len(results[qid]):
                raise FormatError(f"{path}: line {n}: rank {rank} out of sequence")
    return RunRanking(retriever=tag, results=results)


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(qrels):
            for chunk_id in sorted(qrels[qid]):
                grade = qrels[qid][chunk_id]
                if grade >= 1:
                    f.write(f"{qid} 0 {chunk_id} {grade}\n")


def read_qrels(path: str | Path) -> Qrels:
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"{path}: line {n}: expected 4 fields, got {len(parts)}")
            qid, _, chunk_id, grade = parts
            if int(grade) >= 1:
                qrels.setdefault(qid, {})[chunk_id] = int(grade)
    return qrels
