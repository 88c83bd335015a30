"""Subcommand front-end wiring the pipeline stages end to end.

Stages communicate only through files, so every stage is independently
re-runnable and replaceable. Failures exit 1 with a single-line error on
stderr; success exits 0. A lock file serializes subcommands per output
directory. `--mock` on `embed` and `judge` swaps the HTTP clients for
deterministic local stand-ins, making the whole pipeline runnable offline.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

from . import bm25 as bm25_mod
from . import chunker, cleaner, judge as judge_mod, pool as pool_mod, trainer
from .embed_client import EmbedderSpec, EmbeddingClient, load_spec, prefixed
from .errors import ContractError, QueryliftError
from .evaluator import EvalReport, compare_report, evaluate, file_digest
from .heads import load_head, new_head
from .mock import mock_embed_transport, mock_judge_chat
from .runs import read_qrels, read_run, run_from_hits, write_qrels, write_run
from .store import EmbeddingMatrix, load_matrix, top_k


@contextlib.contextmanager
def _dir_lock(out_path: Path):
    """One subcommand at a time per output directory."""
    lock = out_path.resolve().parent / ".querylift.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractError(f"output directory is locked by another run: {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ContractError(f"missing input {what}: {p}")
    return p


def _read_id_text(path: Path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "id" not in rec or "text" not in rec:
                raise ContractError(f"{path}: line {n}: need id and text fields")
            out.append((str(rec["id"]), str(rec["text"])))
    return out


def _write_jsonl(rows: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- subcommands


def cmd_chunk(args) -> int:
    src = _require(args.input, "corpus JSONL")
    out = Path(args.output)
    with _dir_lock(out), open(src, encoding="utf-8") as f, open(out, "w", encoding="utf-8") as o:
        n = chunker.write_chunks(
            chunker.chunk_corpus(f, args.max_chars, overlap=args.overlap), o
        )
    print(f"chunk: wrote {n} chunks to {out}")
    return 0


def cmd_clean_queries(args) -> int:
    src = _require(args.input, "query JSONL")
    out = Path(args.output)
    queries = cleaner.read_queries(src)
    with _dir_lock(out):
        kept, report = cleaner.clean_queries(queries, args.lower_pct, args.upper_pct)
        if args.diversity_k:
            emb = load_matrix(_require(args.embeddings, "query embeddings (.emb)"))
            by_id = {qid: emb.row_index(qid) for qid in (q.id for q in kept)}
            subset = EmbeddingMatrix(
                [q.id for q in kept], emb.data[[by_id[q.id] for q in kept]].copy()
            )
            before = len(kept)
            kept = cleaner.diversity_select(kept, subset, args.diversity_k, args.seed)
            report.record("diversity_select", before, len(kept))
        cleaner.write_queries(kept, out)
        if args.report:
            Path(args.report).write_text(report.to_tsv(), encoding="utf-8")
    print(f"clean-queries: kept {len(kept)} of {len(queries)} queries")
    return 0


def _embedder_client(args) -> EmbeddingClient:
    spec = load_spec(_require(args.spec, "embedder spec JSON"))
    transport = mock_embed_transport() if args.mock else None
    return EmbeddingClient(
        spec,
        cache_dir=args.cache_dir,
        transport=transport,
        concurrency=args.concurrency,
    )


def cmd_embed(args) -> int:
    src = _require(args.input, "id/text JSONL")
    out = Path(args.output)
    client = _embedder_client(args)
    records = [
        (id_, prefixed(client.spec, text, args.kind)) for id_, text in _read_id_text(src)
    ]
    with _dir_lock(out):
        n = client.embed_stream(records, out)
    print(f"embed: wrote {n} vectors (dim {client.spec.dim}) to {out}")
    return 0


def cmd_bm25_index(args) -> int:
    src = _require(args.chunks, "chunks JSONL")
    out = Path(args.output)
    with _dir_lock(out):
        index = bm25_mod.build_index(chunker.read_chunks(src), k1=args.k1, b=args.b)
        bm25_mod.save_index(index, out)
    print(f"bm25-index: indexed {index.n_docs} chunks into {out}")
    return 0


def cmd_retrieve(args) -> int:
    out = Path(args.output)
    if bool(args.bm25_index) == bool(args.queries_emb):
        raise ContractError("pass exactly one of --bm25-index or --queries-emb")
    with _dir_lock(out):
        if args.bm25_index:
            index = bm25_mod.load_index(_require(args.bm25_index, "BM25 index"))
            queries = _read_id_text(_require(args.queries_text, "query JSONL"))
            hits = {qid: bm25_mod.bm25_search(index, text, args.k) for qid, text in queries}
        else:
            queries = load_matrix(_require(args.queries_emb, "query embeddings"))
            docs = load_matrix(_require(args.docs, "document embeddings"))
            per_query = top_k(queries, docs, args.k)
            hits = dict(zip(queries.ids, per_query))
        write_run(run_from_hits(args.tag, hits), out)
    print(f"retrieve: wrote run {args.tag} for {len(hits)} queries to {out}")
    return 0


def cmd_pool(args) -> int:
    out = Path(args.output)
    runs = [read_run(_require(p, "run file")) for p in args.runs]
    with _dir_lock(out):
        pool = pool_mod.build_pool(runs, args.depth)
        pool_mod.write_pool(pool, out)
    sizes = [pool.size(q) for q in pool.query_ids()]
    print(
        f"pool: {len(sizes)} queries, candidates per query "
        f"min {min(sizes)} max {max(sizes)}"
    )
    return 0


def cmd_judge(args) -> int:
    pool = pool_mod.read_pool(_require(args.pool, "candidate pool"))
    query_texts = dict(_read_id_text(_require(args.queries, "query JSONL")))
    chunk_texts = {c.id: c.text for c in chunker.read_chunks(_require(args.chunks, "chunks JSONL"))}
    out_qrels = Path(args.output_qrels)
    if args.mock:
        chat = mock_judge_chat
    else:
        spec = judge_mod.load_judge_spec(_require(args.judge_spec, "judge spec JSON"))
        chat = judge_mod.http_chat(spec)
    with _dir_lock(out_qrels):
        qrels, verdicts = judge_mod.judge_pool(
            pool, query_texts, chunk_texts, chat,
            concurrency=args.concurrency, wal_path=args.verdicts,
        )
        write_qrels(qrels, out_qrels)
        if args.review:
            _write_jsonl(
                judge_mod.undecided_review_rows(verdicts, query_texts, chunk_texts),
                Path(args.review),
            )
    undecided = sum(v.status == "undecided" for v in verdicts)
    labeled = sum(len(r) for r in qrels.values())
    print(
        f"judge: {len(verdicts)} pairs, {labeled} relevant, "
        f"{undecided} undecided, qrels in {out_qrels}"
    )
    return 0


def cmd_analyze(args) -> int:
    qrels = read_qrels(_require(args.qrels, "qrels"))
    runs = [read_run(_require(p, "run file")) for p in args.runs]
    ind_out = Path(args.individual)
    with _dir_lock(ind_out):
        ind_tsv, loo_tsv = pool_mod.contribution_tables(runs, qrels, args.depth)
        ind_out.write_text(ind_tsv, encoding="utf-8")
        Path(args.leave_one_out).write_text(loo_tsv, encoding="utf-8")
        if args.sample_fraction:
            query_texts = dict(_read_id_text(_require(args.queries, "query JSONL")))
            chunk_texts = {
                c.id: c.text for c in chunker.read_chunks(_require(args.chunks, "chunks JSONL"))
            }
            rows = pool_mod.sample_for_validation(
                qrels, args.sample_fraction, args.seed, query_texts, chunk_texts
            )
            _write_jsonl(rows, Path(args.sample_output))
    print(f"analyze: tables in {ind_out} and {args.leave_one_out}")
    return 0


def _load_query_subset(emb_path: Path, qrels) -> EmbeddingMatrix:
    """Rows of the query matrix that have at least one positive, in id order."""
    matrix = load_matrix(emb_path)
    keep = [qid for qid in matrix.ids if qrels.get(qid)]
    if not keep:
        raise ContractError("no embedded query has positives in the qrels")
    rows = [matrix.row_index(q) for q in keep]
    return EmbeddingMatrix(keep, matrix.data[rows].copy())


def cmd_mine(args) -> int:
    qrels = read_qrels(_require(args.qrels, "qrels"))
    docs = load_matrix(_require(args.docs, "document embeddings"))
    queries = _load_query_subset(_require(args.queries_emb, "query embeddings"), qrels)
    head = load_head(_require(args.head, "head checkpoint")) if args.head else None
    out = Path(args.output)
    with _dir_lock(out):
        pool = trainer.mine_negatives(head, queries, docs, qrels, args.mined)
        _write_jsonl(
            [{"query_id": q, "negatives": pool[q]} for q in sorted(pool)], out
        )
    print(f"mine: {args.mined} negatives for {len(pool)} queries in {out}")
    return 0


def _read_negatives(path: Path) -> trainer.NegativePool:
    pool: trainer.NegativePool = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                pool[str(rec["query_id"])] = [str(c) for c in rec["negatives"]]
    return pool


def cmd_train(args) -> int:
    qrels = read_qrels(_require(args.qrels, "qrels"))
    docs = load_matrix(_require(args.docs, "document embeddings"))
    queries = _load_query_subset(_require(args.queries_emb, "query embeddings"), qrels)
    config_text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    config = trainer.parse_config(
        config_text,
        lr=args.lr, total_steps=args.total_steps, batch_size=args.batch_size,
        seed=args.seed, refresh_interval=args.refresh_interval,
        temperature=args.temperature,
        negatives_mined=args.negatives_mined, negatives_sampled=args.negatives_sampled,
    )
    initial = _read_negatives(_require(args.negatives, "negative pool")) if args.negatives else None
    head = new_head(args.head_kind, queries.dim)
    out = Path(args.output)
    with _dir_lock(out):
        state = trainer.train(
            config, head, queries, docs, qrels,
            initial_negatives=initial, checkpoint_dir=args.checkpoint_dir,
        )
        from .heads import save_head

        save_head(head, out)
        if args.metrics:
            Path(args.metrics).write_text(trainer.metrics_tsv(state), encoding="utf-8")
    final_ndcg = state.metric_history[-1][1]
    print(
        f"train: {config.total_steps} steps on {queries.count} queries, "
        f"final train ndcg@10 {final_ndcg:.4f}, head in {out}"
    )
    return 0


def cmd_eval(args) -> int:
    qrels = read_qrels(_require(args.qrels, "qrels"))
    docs = load_matrix(_require(args.docs, "document embeddings"))
    queries = load_matrix(_require(args.queries_emb, "query embeddings"))
    head = load_head(_require(args.head, "head checkpoint")) if args.head else None
    out = Path(args.output)
    with _dir_lock(out):
        report = evaluate(head, queries, docs, qrels, k_list=args.k, name=args.name)
        report.metadata["store"] = f"{args.docs}:{file_digest(args.docs)}"
        if args.head:
            report.metadata["head"] = f"{args.head}:{file_digest(args.head)}"
        out.write_text(report.to_json(), encoding="utf-8")
    means = "  ".join(f"{m}={v:.4f}" for m, v in sorted(report.means.items()))
    print(f"eval[{args.name}]: {means}")
    return 0


def cmd_report(args) -> int:
    reports = [
        EvalReport.from_json(_require(p, "eval report").read_text(encoding="utf-8"))
        for p in args.inputs
    ]
    out = Path(args.output)
    with _dir_lock(out):
        tsv, md = compare_report(reports)
        out.write_text(tsv, encoding="utf-8")
        if args.markdown:
            Path(args.markdown).write_text(md, encoding="utf-8")
    print(tsv, end="")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="querylift",
        description="Build retrieval benchmarks from raw corpora and adapt "
        "query embeddings against a frozen document index.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(
            name, help=help_, formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )
        p.set_defaults(fn=fn)
        return p

    p = add("chunk", cmd_chunk, "split a document corpus into chunks")
    p.add_argument("--input", required=True, help="corpus JSONL with doc_id and text")
    p.add_argument("--output", required=True, help="chunk JSONL to write")
    p.add_argument("--max-chars", type=int, default=500, help="chunk size limit")
    p.add_argument("--overlap", type=int, default=0, help="chars shared with previous chunk")

    p = add("clean-queries", cmd_clean_queries, "filter a raw query log")
    p.add_argument("--input", required=True, help="query JSONL with id and text")
    p.add_argument("--output", required=True, help="cleaned query JSONL")
    p.add_argument("--report", help="per-stage drop-count TSV")
    p.add_argument("--lower-pct", type=float, default=0.25, help="drop bottom length percentile")
    p.add_argument("--upper-pct", type=float, default=0.25, help="drop top length percentile")
    p.add_argument("--diversity-k", type=int, help="keep one query per cluster")
    p.add_argument("--embeddings", help="query .emb (required with --diversity-k)")
    p.add_argument("--seed", type=int, default=0, help="clustering seed")

    p = add("embed", cmd_embed, "embed chunks or queries through a service")
    p.add_argument("--spec", required=True, help="embedder spec JSON")
    p.add_argument("--input", required=True, help="JSONL with id and text")
    p.add_argument("--kind", choices=["doc", "query"], default="doc", help="prefix selection")
    p.add_argument("--output", required=True, help=".emb file to write")
    p.add_argument("--cache-dir", help="embedding disk cache directory")
    p.add_argument("--mock", action="store_true", help="use the offline deterministic embedder")
    p.add_argument("--concurrency", type=int, default=4, help="in-flight request bound")

    p = add("bm25-index", cmd_bm25_index, "build the lexical index")
    p.add_argument("--chunks", required=True, help="chunk JSONL")
    p.add_argument("--output", required=True, help="index file to write")
    p.add_argument("--k1", type=float, default=1.2, help="term-frequency saturation")
    p.add_argument("--b", type=float, default=0.75, help="length normalization")

    p = add("retrieve", cmd_retrieve, "run one retriever over all queries")
    p.add_argument("--queries-emb", help="query .emb (dense mode)")
    p.add_argument("--docs", help="document .emb (dense mode)")
    p.add_argument("--bm25-index", help="BM25 index file (lexical mode)")
    p.add_argument("--queries-text", help="query JSONL (lexical mode)")
    p.add_argument("--k", type=int, default=60, help="hits per query")
    p.add_argument("--tag", required=True, help="retriever name for the run file")
    p.add_argument("--output", required=True, help="TREC run file to write")

    p = add("pool", cmd_pool, "union the runs into a candidate pool")
    p.add_argument("--runs", nargs="+", required=True, help="TREC run files")
    p.add_argument("--depth", type=int, default=60, help="per-run truncation depth")
    p.add_argument("--output", required=True, help="pool JSONL to write")

    p = add("judge", cmd_judge, "filter pooled candidates with the LLM judge")
    p.add_argument("--pool", required=True, help="candidate pool JSONL")
    p.add_argument("--queries", required=True, help="query JSONL (texts)")
    p.add_argument("--chunks", required=True, help="chunk JSONL (texts)")
    p.add_argument("--output-qrels", required=True, help="TREC qrels to write")
    p.add_argument("--verdicts", help="write-ahead verdict log JSONL (enables resume)")
    p.add_argument("--review", help="JSONL of undecided pairs for human review")
    p.add_argument("--judge-spec", help="judge endpoint spec JSON")
    p.add_argument("--mock", action="store_true", help="use the offline token-containment judge")
    p.add_argument("--concurrency", type=int, default=4, help="concurrent judge calls")

    p = add("analyze", cmd_analyze, "retriever contribution tables and validation sample")
    p.add_argument("--runs", nargs="+", required=True, help="TREC run files")
    p.add_argument("--qrels", required=True, help="TREC qrels")
    p.add_argument("--depth", type=int, default=420, help="candidates per query")
    p.add_argument("--individual", required=True, help="individual-recall TSV to write")
    p.add_argument("--leave-one-out", required=True, help="leave-one-out TSV to write")
    p.add_argument("--sample-fraction", type=float, help="export a validation sample")
    p.add_argument("--sample-output", help="validation sample JSONL")
    p.add_argument("--queries", help="query JSONL (texts, for the sample)")
    p.add_argument("--chunks", help="chunk JSONL (texts, for the sample)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")

    p = add("mine", cmd_mine, "mine hard negatives for labeled queries")
    p.add_argument("--queries-emb", required=True, help="query .emb")
    p.add_argument("--docs", required=True, help="document .emb")
    p.add_argument("--qrels", required=True, help="TREC qrels")
    p.add_argument("--mined", type=int, default=16, help="negatives kept per query")
    p.add_argument("--head", help="head checkpoint to mine with (default: raw embeddings)")
    p.add_argument("--output", required=True, help="negative pool JSONL")

    p = add("train", cmd_train, "train an adapter head against the frozen index")
    p.add_argument("--queries-emb", required=True, help="query .emb")
    p.add_argument("--docs", required=True, help="document .emb")
    p.add_argument("--qrels", required=True, help="TREC qrels")
    p.add_argument("--config", help="flat key=value training config file")
    p.add_argument("--head-kind", choices=["linear", "ffn"], default="linear", help="head type")
    p.add_argument("--negatives", help="initial negative pool JSONL (from mine)")
    p.add_argument("--output", required=True, help="trained head checkpoint")
    p.add_argument("--metrics", help="per-step metrics TSV")
    p.add_argument("--checkpoint-dir", help="periodic checkpoint directory")
    p.add_argument("--lr", type=float, help="override: learning rate (default 5e-06)")
    p.add_argument("--total-steps", type=int, help="override: steps (default 1000)")
    p.add_argument("--batch-size", type=int, help="override: batch size (default 32)")
    p.add_argument("--temperature", type=float, help="override: softmax temperature (default 0.1)")
    p.add_argument("--refresh-interval", type=int, help="override: negative refresh cadence (default 200)")
    p.add_argument("--negatives-mined", type=int, help="override: mined negatives (default 16)")
    p.add_argument("--negatives-sampled", type=int, help="override: sampled negatives (default 8)")
    p.add_argument("--seed", type=int, help="override: RNG seed (default 0)")

    p = add("eval", cmd_eval, "score a head (or the base model) on labeled queries")
    p.add_argument("--queries-emb", required=True, help="query .emb")
    p.add_argument("--docs", required=True, help="document .emb")
    p.add_argument("--qrels", required=True, help="TREC qrels")
    p.add_argument("--head", help="head checkpoint (omit for the base model)")
    p.add_argument("--k", type=int, nargs="+", default=[10], help="metric cutoffs")
    p.add_argument("--name", default="run", help="variant name for the report")
    p.add_argument("--output", required=True, help="eval report JSON")

    p = add("report", cmd_report, "compare eval reports in one table")
    p.add_argument("--inputs", nargs="+", required=True, help="eval report JSON files")
    p.add_argument("--output", required=True, help="comparison TSV")
    p.add_argument("--markdown", help="comparison Markdown table")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except QueryliftError as e:
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
