"""Retrieval benchmark construction and query-only embedding adaptation.

Two halves share one set of interchange formats:

- benchmark construction: chunk a corpus, clean a query log, retrieve with
  an ensemble (dense + BM25), pool by union, filter with an LLM judge;
- adaptation: train a small query-embedding head (linear or GELU FFN) with
  InfoNCE + periodically refreshed hard negatives against a frozen document
  index, then evaluate with recall@k / NDCG@k.
"""

__version__ = "0.1.0"

from .errors import (
    ContractError,
    CredentialError,
    FormatError,
    QueryliftError,
    StorageError,
    TrainingError,
    TransportError,
)
from .store import EmbeddingMatrix, SearchHit, load_matrix, save_matrix, top_k

__all__ = [
    "ContractError",
    "CredentialError",
    "EmbeddingMatrix",
    "FormatError",
    "QueryliftError",
    "SearchHit",
    "StorageError",
    "TrainingError",
    "TransportError",
    "load_matrix",
    "save_matrix",
    "top_k",
    "__version__",
]
