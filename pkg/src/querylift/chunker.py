"""Recursive character splitting of documents into retrieval-sized chunks.

Documents are cut along a separator hierarchy (paragraph, line, sentence,
space, then hard character split), greedily re-merging adjacent pieces while
they fit. Chunks are non-overlapping substrings of the source in source
order; only separator/whitespace characters fall in the gaps between them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, TextIO

from .errors import ContractError, FormatError

DEFAULT_MAX_CHARS = 500
DEFAULT_SEPARATORS = ("\n\n", "\n", ". ", " ", "")


@dataclass(frozen=True)
class ChunkRecord:
    id: str  # "<doc_id>#<ord>"
    doc_id: str
    ord: int
    text: str


def _split_spans(text: str, lo: int, hi: int, max_chars: int, seps: tuple[str, ...]) -> list[tuple[int, int]]:
    """Spans (lo, hi) over `text`, each at most max_chars wide."""
    if hi - lo <= max_chars:
        return [(lo, hi)]
    if not seps or seps[0] == "":
        # hard character split, last resort
        return [(s, min(s + max_chars, hi)) for s in range(lo, hi, max_chars)]

    sep = seps[0]
    pieces: list[tuple[int, int]] = []
    pos = lo
    while pos <= hi - len(sep):
        nxt = text.find(sep, pos, hi)
        if nxt == -1:
            break
        pieces.append((pos, nxt))
        pos = nxt + len(sep)
    pieces.append((pos, hi))

    if len(pieces) == 1:
        # separator absent here; fall through to the next one
        return _split_spans(text, lo, hi, max_chars, seps[1:])

    # Greedily merge adjacent pieces (separator included) while they fit.
    merged: list[tuple[int, int]] = []
    cur_lo, cur_hi = pieces[0]
    for p_lo, p_hi in pieces[1:]:
        if p_hi - cur_lo <= max_chars:
            cur_hi = p_hi
        else:
            merged.append((cur_lo, cur_hi))
            cur_lo, cur_hi = p_lo, p_hi
    merged.append((cur_lo, cur_hi))

    out: list[tuple[int, int]] = []
    for m_lo, m_hi in merged:
        if m_hi - m_lo <= max_chars:
            out.append((m_lo, m_hi))
        else:
            out.extend(_split_spans(text, m_lo, m_hi, max_chars, seps[1:]))
    return out


def split_document(
    doc_id: str,
    text: str,
    max_chars: int = DEFAULT_MAX_CHARS,
    separators: Iterable[str] = DEFAULT_SEPARATORS,
    overlap: int = 0,
) -> list[ChunkRecord]:
    """Split one document into ordered chunks of at most max_chars characters.

    Lengths count Unicode scalar values, never bytes. Whitespace-only chunks
    are dropped; surviving chunks get contiguous ordinals from 0. With
    overlap > 0 each chunk after the first is prefixed with the tail of its
    predecessor, capped so no chunk exceeds max_chars.
    """
    if max_chars < 1:
        raise ContractError(f"max_chars must be >= 1, got {max_chars}")
    if overlap < 0 or overlap >= max_chars:
        raise ContractError(f"overlap must be in [0, max_chars), got {overlap}")
    seps = tuple(separators)
    if not text:
        return []

    spans = _split_spans(text, 0, len(text), max_chars - overlap if overlap else max_chars, seps)
    texts = [text[a:b] for a, b in spans if text[a:b].strip()]
    if overlap:
        with_ov = [texts[0]] if texts else []
        for prev, cur in zip(texts, texts[1:]):
            with_ov.append((prev[-overlap:] + cur)[:max_chars])
        texts = with_ov
    return [
        ChunkRecord(id=f"{doc_id}#{n}", doc_id=doc_id, ord=n, text=t)
        for n, t in enumerate(texts)
    ]


def chunk_corpus(
    lines: Iterable[str],
    max_chars: int = DEFAULT_MAX_CHARS,
    separators: Iterable[str] = DEFAULT_SEPARATORS,
    overlap: int = 0,
) -> Iterator[ChunkRecord]:
    """Stream `{"doc_id", "text"}` JSONL lines into ChunkRecords.

    Bounded memory: one document is resident at a time.
    """
    seps = tuple(separators)
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"line {n}: invalid JSON: {e.msg}") from e
        if not isinstance(rec, dict) or "doc_id" not in rec or "text" not in rec:
            raise FormatError(f"line {n}: expected object with doc_id and text")
        yield from split_document(str(rec["doc_id"]), str(rec["text"]), max_chars, seps, overlap)


def write_chunks(chunks: Iterable[ChunkRecord], out: TextIO) -> int:
    n = 0
    for c in chunks:
        out.write(
            json.dumps(
                {"id": c.id, "doc_id": c.doc_id, "ord": c.ord, "text": c.text},
                ensure_ascii=False,
            )
            + "\n"
        )
        n += 1
    return n


def read_chunks(path: str | Path) -> list[ChunkRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    ChunkRecord(
                        id=str(rec["id"]),
                        doc_id=str(rec["doc_id"]),
                        ord=int(rec["ord"]),
                        text=str(rec["text"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise FormatError(f"{path}: line {n}: bad chunk record") from e
    return out
