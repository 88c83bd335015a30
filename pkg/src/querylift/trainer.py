"""Query-only adaptation: InfoNCE over mined hard negatives, AdamW, cosine LR.

The document store is frozen throughout; only the head's parameters move.
Hard negatives are re-mined with the current head at every step that is a
multiple of the refresh interval (step 0 included), tracking the moving
ranking so stale negatives never accumulate. The loop is fully
deterministic given a seed, and a checkpointed TrainState resumes the exact
trajectory: it carries the optimizer moments, the RNG state, the epoch
permutation and cursor, and the live negative pool.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ContractError, FormatError, TrainingError
from .evaluator import evaluate
from .heads import Head, clone_head, load_head, new_head, save_head
from .runs import Qrels
from .store import EmbeddingMatrix, normalize_rows

NegativePool = dict[str, list[str]]


@dataclass
class TrainConfig:
    temperature: float = 0.1
    lr: float = 5e-6
    total_steps: int = 1000
    batch_size: int = 32
    negatives_mined: int = 16
    negatives_sampled: int = 8
    refresh_interval: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ContractError("temperature must be > 0")
        if self.negatives_sampled > self.negatives_mined:
            raise ContractError("negatives_sampled must be <= negatives_mined")
        if self.negatives_sampled < 1:
            raise ContractError("need at least one sampled negative")
        if self.refresh_interval < 1:
            raise ContractError("refresh_interval must be >= 1")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ContractError("total_steps and batch_size must be >= 1")
        if self.lr < 0:
            raise ContractError("lr must be >= 0")


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse a flat key=value config file; keyword overrides win."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    values: dict = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {n}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in known:
            raise FormatError(f"config line {n}: unknown key {key!r}")
        values[key] = raw
    cfg: dict = {}
    for key, raw in values.items():
        caster = int if known[key] in ("int", int) else float
        cfg[key] = caster(raw)
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    return TrainConfig(**cfg)


def lr_at(step: int, total_steps: int, lr: float) -> float:
    """Cosine decay, no warm-up: lr/2 * (1 + cos(pi * step / total_steps))."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def infonce_loss(
    q_emb: np.ndarray,
    pos_emb: np.ndarray,
    neg_embs: np.ndarray,
    temperature: float,
) -> tuple[float, np.ndarray]:
    """Single-example InfoNCE on dot-product similarities.

    Returns the loss and its gradient with respect to q_emb. Stabilized by
    max-subtraction before exponentiation.
    """
    if temperature <= 0:
        raise ContractError("temperature must be > 0")
    q = np.asarray(q_emb, dtype=np.float64)
    pos = np.asarray(pos_emb, dtype=np.float64)
    negs = np.asarray(neg_embs, dtype=np.float64)
    if negs.ndim != 2 or negs.shape[0] < 1:
        raise ContractError("need at least one negative")
    sims = np.concatenate(([pos @ q], negs @ q)) / temperature
    m = float(np.max(sims))
    exps = np.exp(sims - m)
    lse = m + math.log(float(np.sum(exps)))
    loss = lse - sims[0]
    softmax = exps / float(np.sum(exps))
    # d loss / d q = (sum_k softmax_k v_k - pos) / temperature
    candidates = np.vstack([pos[None, :], negs])
    grad = (softmax @ candidates - pos) / temperature
    return float(loss), grad


def mine_negatives(
    head: Head | None,
    query_embs: EmbeddingMatrix,
    doc_store: EmbeddingMatrix,
    qrels: Qrels,
    mined: int,
) -> NegativePool:
    """Top-ranked non-positives per query under the current head.

    Scans to depth mined + |positives(q)| per query, which always yields
    exactly `mined` negatives or proves the corpus too small.
    """
    if mined < 1:
        raise ContractError("mined must be >= 1")
    positives = {qid: set(qrels.get(qid, {})) for qid in query_embs.ids}
    for qid, pos in positives.items():
        if doc_store.count < mined + len(pos):
            raise ContractError(
                f"corpus of {doc_store.count} docs cannot supply {mined} negatives "
                f"for query {qid} with {len(pos)} positives"
            )
    x = query_embs.data.astype(np.float64)
    if head is not None:
        x = head.forward(x)
    x = normalize_rows(x).astype(np.float64)
    scores = x @ doc_store.data.astype(np.float64).T
    doc_ids = np.array(doc_store.ids)
    pool: NegativePool = {}
    for qi, qid in enumerate(query_embs.ids):
        depth = mined + len(positives[qid])
        order = np.lexsort((doc_ids, -scores[qi]))[:depth]
        negs = [str(doc_ids[i]) for i in order if str(doc_ids[i]) not in positives[qid]]
        pool[qid] = negs[:mined]
    return pool


class AdamW:
    """Decoupled-weight-decay Adam over a dict of float32 parameter arrays.

    Moments are float32 (checkpointed bit for bit); per-step arithmetic
    runs in float64 before casting back.
    """

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros(v.shape, dtype=np.float32) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float32) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            m = c.beta1 * self.m[name].astype(np.float64) + (1 - c.beta1) * g
            v = c.beta2 * self.v[name].astype(np.float64) + (1 - c.beta2) * g * g
            self.m[name] = m.astype(np.float32)
            self.v[name] = v.astype(np.float32)
            update = lr * ((m / bc1) / (np.sqrt(v / bc2) + c.eps) + c.weight_decay * p)
            p[...] = (p.astype(np.float64) - update).astype(np.float32)


@dataclass
class TrainState:
    config: TrainConfig
    head: Head
    optimizer: AdamW
    rng: np.random.Generator
    pair_order: np.ndarray  # permutation over the canonical pair list
    pair_cursor: int
    neg_pool: NegativePool
    step: int = 0
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    refresh_steps: list[int] = field(default_factory=list)
    metric_history: list[tuple[int, float]] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        arrays = {"pair_order": self.pair_order}
        for name, arr in self.head.param_arrays().items():
            arrays[f"param:{name}"] = arr
            arrays[f"m:{name}"] = self.optimizer.m[name]
            arrays[f"v:{name}"] = self.optimizer.v[name]
        meta = {
            "config": {f.name: getattr(self.config, f.name) for f in fields(TrainConfig)},
            "head_kind": self.head.kind,
            "dim": self.head.dim,
            "adam_t": self.optimizer.t,
            "rng_state": self.rng.bit_generator.state,
            "pair_cursor": self.pair_cursor,
            "neg_pool": self.neg_pool,
            "step": self.step,
            "losses": self.losses,
            "lrs": self.lrs,
            "refresh_steps": self.refresh_steps,
            "metric_history": self.metric_history,
        }
        arrays["meta_json"] = np.array(json.dumps(meta))
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta_json"]))
            config = TrainConfig(**meta["config"])
            head = new_head(meta["head_kind"], meta["dim"])
            for name, arr in head.param_arrays().items():
                arr[...] = data[f"param:{name}"]
            optimizer = AdamW(head.param_arrays(), config)
            optimizer.t = meta["adam_t"]
            for name in head.param_arrays():
                optimizer.m[name] = data[f"m:{name}"].copy()
                optimizer.v[name] = data[f"v:{name}"].copy()
            rng = np.random.default_rng()
            rng.bit_generator.state = meta["rng_state"]
            return cls(
                config=config,
                head=head,
                optimizer=optimizer,
                rng=rng,
                pair_order=data["pair_order"].copy(),
                pair_cursor=meta["pair_cursor"],
                neg_pool={k: list(v) for k, v in meta["neg_pool"].items()},
                step=meta["step"],
                losses=meta["losses"],
                lrs=meta["lrs"],
                refresh_steps=meta["refresh_steps"],
                metric_history=[tuple(e) for e in meta["metric_history"]],
            )


def _canonical_pairs(query_ids: list[str], qrels: Qrels) -> list[tuple[str, str]]:
    """One training pair per (query, labeled positive), in sorted order."""
    pairs = []
    for qid in sorted(query_ids):
        for chunk_id in sorted(qrels[qid]):
            pairs.append((qid, chunk_id))
    return pairs


def _validate_pool(pool: NegativePool, qrels: Qrels, sampled: int) -> None:
    for qid, negs in pool.items():
        overlap = set(negs) & set(qrels.get(qid, {}))
        if overlap:
            raise ContractError(
                f"negative pool for {qid} contains labeled positives {sorted(overlap)[:3]}"
            )
        if len(negs) < sampled:
            raise ContractError(f"negative pool for {qid} smaller than negatives_sampled")


def train(
    config: TrainConfig,
    head: Head,
    train_queries: EmbeddingMatrix,
    doc_store: EmbeddingMatrix,
    qrels: Qrels,
    eval_hook: Callable[["TrainState"], None] | None = None,
    initial_negatives: NegativePool | None = None,
    checkpoint_dir: str | Path | None = None,
    state: TrainState | None = None,
) -> TrainState:
    """Run (or resume) the adaptation loop; returns the final TrainState.

    `initial_negatives` substitutes for the step-0 mining pass (it must have
    been produced by the same procedure); later refreshes always re-mine.
    """
    missing = [qid for qid in train_queries.ids if not qrels.get(qid)]
    if missing:
        raise ContractError(
            f"{len(missing)} train queries have no positives, e.g. {missing[:3]}"
        )
    if train_queries.dim != doc_store.dim:
        raise ContractError("query/store dim mismatch")
    if not doc_store.is_normalized():
        raise ContractError("document store must be normalized before training")

    pairs = _canonical_pairs(train_queries.ids, qrels)
    query_row = {qid: i for i, qid in enumerate(train_queries.ids)}
    doc_row = {cid: i for i, cid in enumerate(doc_store.ids)}
    docs64 = doc_store.data.astype(np.float64)
    queries64 = train_queries.data.astype(np.float64)

    if state is None:
        rng = np.random.default_rng(config.seed)
        state = TrainState(
            config=config,
            head=head,
            optimizer=AdamW(head.param_arrays(), config),
            rng=rng,
            pair_order=rng.permutation(len(pairs)),
            pair_cursor=0,
            neg_pool={},
        )
    else:
        head = state.head
        config = state.config

    def train_ndcg() -> float:
        report = evaluate(head, train_queries, doc_store, qrels, k_list=[10], name="train")
        return report.means["ndcg@10"]

    def checkpoint(tag: str) -> None:
        if checkpoint_dir is None:
            return
        d = Path(checkpoint_dir)
        d.mkdir(parents=True, exist_ok=True)
        save_head(head, d / f"head_{tag}.bin")
        state.save(d / f"state_{tag}.npz")

    for s in range(state.step, config.total_steps):
        state.step = s
        # a state restored from a refresh-step checkpoint already carries
        # that refresh's pool and bookkeeping; never run it twice
        if s % config.refresh_interval == 0 and s not in state.refresh_steps:
            if s == 0 and initial_negatives is not None:
                pool = {qid: list(initial_negatives[qid]) for qid in train_queries.ids}
            else:
                pool = mine_negatives(
                    head, train_queries, doc_store, qrels, config.negatives_mined
                )
            _validate_pool(pool, qrels, config.negatives_sampled)
            state.neg_pool = pool
            state.refresh_steps.append(s)
            state.metric_history.append((s, train_ndcg()))
            if eval_hook is not None:
                eval_hook(state)
            checkpoint(f"step{s:06d}")

        batch: list[tuple[str, str]] = []
        for _ in range(config.batch_size):
            if state.pair_cursor >= len(pairs):
                state.pair_order = state.rng.permutation(len(pairs))
                state.pair_cursor = 0
            batch.append(pairs[int(state.pair_order[state.pair_cursor])])
            state.pair_cursor += 1

        x = np.stack([queries64[query_row[qid]] for qid, _ in batch])
        y = head.forward(x)
        norms = np.linalg.norm(y, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise TrainingError(f"head produced a zero vector at step {s}")
        y_hat = y / norms

        lr = lr_at(s, config.total_steps, config.lr)
        grad_y = np.zeros_like(y)
        loss_total = 0.0
        for i, (qid, pos_id) in enumerate(batch):
            negs = state.neg_pool[qid]
            picked = state.rng.choice(len(negs), size=config.negatives_sampled, replace=False)
            neg_rows = docs64[[doc_row[negs[int(j)]] for j in picked]]
            loss_i, grad_qhat = infonce_loss(
                y_hat[i], docs64[doc_row[pos_id]], neg_rows, config.temperature
            )
            loss_total += loss_i
            # through the normalization: d y = (g - y_hat (y_hat . g)) / |y|
            grad_y[i] = (grad_qhat - y_hat[i] * float(y_hat[i] @ grad_qhat)) / norms[i, 0]

        loss = loss_total / len(batch)
        if math.isnan(loss) or math.isinf(loss):
            raise TrainingError(
                f"non-finite loss at step {s}, batch queries {[q for q, _ in batch]}"
            )
        grads = head.backward(x, grad_y / len(batch)).params
        state.optimizer.step(grads, lr)
        state.losses.append(loss)
        state.lrs.append(lr)

    state.step = config.total_steps
    if not state.metric_history or state.metric_history[-1][0] != config.total_steps:
        state.metric_history.append((config.total_steps, train_ndcg()))
        if eval_hook is not None:
            eval_hook(state)
    checkpoint("final")
    return state


def metrics_tsv(state: TrainState) -> str:
    """Per-step TSV (step, lr, loss, train_ndcg@10) for curve plotting."""
    history = dict(state.metric_history)
    lines = ["step\tlr\tloss\ttrain_ndcg@10"]
    for s, (lr, loss) in enumerate(zip(state.lrs, state.losses)):
        ndcg = f"{history[s]:.6f}" if s in history else ""
        lines.append(f"{s}\t{lr:.10g}\t{loss:.8f}\t{ndcg}")
    if state.step in history:
        lines.append(f"{state.step}\t\t\t{history[state.step]:.6f}")
    return "\n".join(lines) + "\n"
