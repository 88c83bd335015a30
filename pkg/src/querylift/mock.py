"""Deterministic offline stand-ins for the embedding and judge services.

The mock embedder derives everything from its model string, so distinct
"models" give distinct but stable vector spaces:

    mock-<dim>             summed seeded token vectors, L2-normalized
    mock-<dim>-rot<seed>   same, then a fixed random rotation

A rotated query model against an unrotated document model yields the
misaligned-encoder setup the adaptation trainer exists to fix, which makes
end-to-end pipeline fixtures meaningful without any real encoder.

The mock judge answers the chat contract with a token-containment rule:
relevant iff every query token occurs in the chunk.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from .bm25 import tokenize
from .errors import ContractError

_MODEL_RE = re.compile(r"^mock-(\d+)(?:-rot(\d+))?$")


def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


def _rotation(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))  # sign-fix keeps the factorization unique


class MockEmbedder:
    """Stable hash-based text encoder configured entirely by a model string."""

    def __init__(self, model: str):
        m = _MODEL_RE.match(model)
        if not m:
            raise ContractError(
                f"mock embedder model must look like mock-<dim>[-rot<seed>], got {model!r}"
            )
        self.model = model
        self.dim = int(m.group(1))
        self.rotation = _rotation(self.dim, int(m.group(2))) if m.group(2) else None
        self._token_cache: dict[str, np.ndarray] = {}

    def embed_one(self, text: str) -> np.ndarray:
        tokens = tokenize(text) or [f"\x00raw:{text}"]
        acc = np.zeros(self.dim, dtype=np.float64)
        for t in tokens:
            vec = self._token_cache.get(t)
            if vec is None:
                vec = _token_vector(t, self.dim)
                self._token_cache[t] = vec
            acc += vec
        norm = np.linalg.norm(acc)
        if norm == 0.0:
            acc[0] = 1.0
            norm = 1.0
        acc /= norm
        if self.rotation is not None:
            acc = self.rotation @ acc
        return acc

    def embed(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.stack([self.embed_one(t) for t in texts])


def mock_embed_transport(counter: list[int] | None = None):
    """In-process transport serving the embeddings wire contract.

    The MockEmbedder is instantiated from the request's model field, so one
    transport serves every mock model. `counter`, when given, collects the
    batch size of each request.
    """
    def transport(url: str, payload: dict, headers: dict) -> tuple[int, dict]:
        texts = payload["input"]
        if counter is not None:
            counter.append(len(texts))
        embedder = MockEmbedder(payload["model"])
        rows = embedder.embed(list(texts))
        return 200, {
            "data": [
                {"index": i, "embedding": [float(v) for v in rows[i]]}
                for i in range(len(texts))
            ]
        }

    return transport


_QUERY_RE = re.compile(r"Query:\s*(.*?)\s*Article Chunk:", re.DOTALL)
_CHUNK_RE = re.compile(r"Article Chunk:\s*(.*)\Z", re.DOTALL)


def mock_judge_chat(messages: list[dict]) -> str:
    """Chat function: relevant iff the chunk contains every query token."""
    user = next(m["content"] for m in reversed(messages) if m["role"] == "user")
    q_match = _QUERY_RE.search(user)
    c_match = _CHUNK_RE.search(user)
    if not q_match or not c_match:
        return "VERDICT: NOT_RELEVANT"
    q_tokens = set(tokenize(q_match.group(1)))
    c_tokens = set(tokenize(c_match.group(1)))
    if q_tokens and q_tokens <= c_tokens:
        return "The chunk covers the question.\nVERDICT: RELEVANT"
    return "The chunk does not answer it.\nVERDICT: NOT_RELEVANT"
