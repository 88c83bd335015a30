"""Text encoders served by the local embedding endpoint.

Two backends, selected by the model identifier:

  hash-mlp:<dim>[:<seed>]   built-in: hashed word + character-trigram
                            features pushed through a seeded random-weight
                            GELU MLP. Fully deterministic, loads instantly,
                            needs no downloads. Random features are not
                            semantic, but they are a faithful stand-in for
                            exercising retrieval plumbing end to end.
  st:<model-name>           any sentence-transformers model available
                            locally (optional dependency).

Every backend embeds each text independently of its batch companions.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

_FEATURE_BUCKETS = 2048


def _bucket(token: str) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % _FEATURE_BUCKETS


def _features(text: str) -> np.ndarray:
    vec = np.zeros(_FEATURE_BUCKETS, dtype=np.float64)
    lowered = text.lower()
    tokens = [t for t in "".join(c if c.isalnum() else " " for c in lowered).split() if t]
    for token in tokens:
        vec[_bucket("w:" + token)] += 1.0
        for i in range(len(token) - 2):
            vec[_bucket("g:" + token[i : i + 3])] += 0.5
    if not tokens:
        vec[_bucket("raw:" + text)] = 1.0
    return vec


def _gelu(t: np.ndarray) -> np.ndarray:
    return 0.5 * t * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (t + 0.044715 * t**3)))


class HashMlpEncoder:
    """Seeded random two-layer GELU network over hashed text features."""

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        rng = np.random.default_rng(seed)
        hidden = max(dim, 128)
        self.w1 = rng.standard_normal((_FEATURE_BUCKETS, hidden)) / math.sqrt(_FEATURE_BUCKETS)
        self.w2 = rng.standard_normal((hidden, dim)) / math.sqrt(hidden)

    def encode(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float64)
        feats = np.stack([_features(t) for t in texts])
        out = _gelu(feats @ self.w1) @ self.w2
        # degenerate all-zero rows cannot be normalized downstream
        dead = np.linalg.norm(out, axis=1) == 0.0
        out[dead, 0] = 1.0
        return out


class SentenceTransformerEncoder:
    """Thin adapter over a locally available sentence-transformers model."""

    def __init__(self, model_name: str):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as e:
            raise RuntimeError(
                "sentence-transformers is not installed; use a hash-mlp model "
                "or install the 'st' extra"
            ) from e
        self._model = SentenceTransformer(model_name)
        self.dim = int(self._model.get_sentence_embedding_dimension())

    def encode(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.asarray(
            self._model.encode(texts, convert_to_numpy=True, normalize_embeddings=False),
            dtype=np.float64,
        )


def load_encoder(model: str):
    """Instantiate the backend named by a model identifier.

    Raises on any failure; callers treat that as a fatal startup error.
    """
    if model.startswith("hash-mlp:"):
        parts = model.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"bad hash-mlp model id {model!r}")
        dim = int(parts[1])
        seed = int(parts[2]) if len(parts) == 3 else 0
        return HashMlpEncoder(dim, seed)
    if model.startswith("st:"):
        return SentenceTransformerEncoder(model[3:])
    raise ValueError(
        f"unknown model identifier {model!r}; expected hash-mlp:<dim>[:<seed>] or st:<name>"
    )
