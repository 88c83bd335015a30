"""LLM-judge filtering of pooled candidates into final relevance labels.

Every (query, candidate) pair gets exactly one verdict. The judge prompt is
a fixed annotation rubric with few-shot examples; the only addition is a
terminal output-format clause so responses are machine-parseable. The
parser takes the last `VERDICT:` line in the reply; a reply without one is
retried (temperature stays 0) up to three attempts before being recorded
as undecided. Undecided pairs are excluded from qrels and surface in a
review export, never silently dropped.

Verdicts append to a write-ahead log as they complete, so interrupted runs
resume without repeating network calls, and a finished log reproduces the
exact qrels offline.
"""

from __future__ import annotations

import json
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import requests

from .errors import ContractError, CredentialError, FormatError
from .pool import CandidatePool
from .runs import Qrels

ANNOTATION_INSTRUCTIONS = """Annotation Instructions
The focus is on whether an article chunk would help a support agent answer a query. Key instructions for annotators:

Focus on Problem in the query and Information in article chunk: Determine if the problem described in the query can be answered by the information present in article chunk. If article chunk's information would likely answer the query, then article chunk should be labeled as relevant. For example, if the article chunk explains how to use certain features in the app and the query is also asking how to use those features (even if in different words).

IMPORTANT - Beware of Superficial Word Overlap: Do not label an article chunk as relevant only because it shares some keywords with the query. Read the article chunk and query fully - article chunk and query might both mention a common term (like "login") but could be about different aspects of login (one about UI for the login page, another about authentication). Only consider lexical overlap meaningful if the article chunk contains information to answer the query (e.g. the query asks how to solve a specific login issue, and the article chunk contains information to solve that specific login issue).

{few_shot_examples}

Edge case: In the case article chunk contains only partial information required to answer the query, label it relevant only in the case when it answers the query substantially. Simple lexical overlap does not imply relevance. When in doubt, ask: "Would a support agent benefit from seeing the article chunk while answering the query?" If yes, label it similar; if not, or only minimally, then it's not relevant enough to help in the support workflow."""

FEW_SHOT_EXAMPLES = r"""Examples of Relevant article chunk:

Example 1: Query: "Where can I find the DevRev API documentation?" and article chunk: "Resources to learn how to use DevRev APIs can be found at https://developer.devrev.ai/". The query is asking about where to find documentation on how to use DevRev APIs and the article chunk contains the information about the location where to find DevRev API documentation. The article chunk should be marked as relevant - it contains the information required to answer the query (even if words differ).

Example 2: Query: "What is a custom object?" and article chunk: "To create a custom object raise a support ticket. Custom objects are DevRev objects which can be customized". Even though the article chunk initially contains the information on how to create a custom object, it later also contains the information on what is a custom object which is what is asked in the query. Mark the article chunk relevant.

Examples of Non-Relevant article chunk:

Example 1: Query: "How to create a vista?" vs article chunk: "Vista is a list of DevRev objects" Both query and article chunk are about vistas and share the word "vista" but the information in article chunk is different from what query is asking about (query is asking how to create a vista, the article chunk is about what are vistas). This article chunk should be marked non relevant - information in the article chunk would not help answer the query.

Example 2: Query: "How to solve FORBIDDEN error when calling custom object API?" vs article chunk: "To solve BAD_REQUEST error when calling custom object API, look for DevRev custom object API documentation and fix your request structure". On the surface the article chunk looks relevant (same feature: custom object API). However, the error nature is different (one is a FORBIDDEN error, another is a BAD_REQUEST error). Unless further context in the article chunk reveals that both are the same errors, treat the article chunk as non relevant because the resolutions of both errors would differ (one might need more permissions, the other requires fixing the request).

Example 3: Query: Resource Center downloads tutorials API documentation vs article chunk: "Prerequisites\n* Send your first API request\n* Making a GET request\n* Next steps\n\nAPI Reference\n\nGetting started\n===============\n\nCopy page\n\nThe DevRev API is organized around REST. Our API has predictable resource-oriented URLs, accepts". On the surface the article chunk appears to be answering the query because it has links to the documentation but the problem is that it is part of start of a webpage so only has relative links and not actual content or complete URL."""

OUTPUT_FORMAT_CLAUSE = """After your reasoning, end your response with exactly one line:
VERDICT: RELEVANT
or
VERDICT: NOT_RELEVANT"""

USER_TEMPLATE = "Query: {query}\nArticle Chunk: {candidate}"

_VERDICT_RE = re.compile(r"VERDICT:\s*(RELEVANT|NOT_RELEVANT)")

# chat function: list of {"role", "content"} messages -> assistant text
ChatFn = Callable[[list[dict]], str]


def build_prompt(query: str, chunk: str) -> tuple[str, str]:
    """(system message, user message) for one candidate pair; byte-stable."""
    system = (
        ANNOTATION_INSTRUCTIONS.replace("{few_shot_examples}", FEW_SHOT_EXAMPLES)
        + "\n\n"
        + OUTPUT_FORMAT_CLAUSE
    )
    user = USER_TEMPLATE.format(query=query, candidate=chunk)
    return system, user


def parse_verdict(text: str) -> bool | None:
    """Relevance from the last VERDICT line; None when no such line exists."""
    matches = _VERDICT_RE.findall(text)
    if not matches:
        return None
    return matches[-1] == "RELEVANT"


@dataclass(frozen=True)
class JudgeVerdict:
    query_id: str
    chunk_id: str
    relevant: bool
    raw_response: str
    attempts: int
    status: str  # decided | undecided

    def to_json(self) -> str:
        return json.dumps(
            {
                "query_id": self.query_id,
                "chunk_id": self.chunk_id,
                "relevant": self.relevant,
                "raw_response": self.raw_response,
                "attempts": self.attempts,
                "status": self.status,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "JudgeVerdict":
        raw = json.loads(line)
        return cls(
            query_id=str(raw["query_id"]),
            chunk_id=str(raw["chunk_id"]),
            relevant=bool(raw["relevant"]),
            raw_response=str(raw["raw_response"]),
            attempts=int(raw["attempts"]),
            status=str(raw["status"]),
        )


@dataclass(frozen=True)
class JudgeSpec:
    endpoint: str
    model: str
    auth_env_var: str = ""


def load_judge_spec(path: str | Path) -> JudgeSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return JudgeSpec(**raw)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise FormatError(f"{path}: bad judge spec: {e}") from e


def http_chat(spec: JudgeSpec) -> ChatFn:
    """Chat-completion client: messages in, assistant text out, temperature 0."""
    import os

    def chat(messages: list[dict]) -> str:
        headers = {"Content-Type": "application/json"}
        if spec.auth_env_var:
            key = os.environ.get(spec.auth_env_var)
            if not key:
                raise CredentialError(f"environment variable {spec.auth_env_var} is not set")
            headers["Authorization"] = f"Bearer {key}"
        resp = requests.post(
            spec.endpoint,
            json={"model": spec.model, "messages": messages, "temperature": 0},
            headers=headers,
            timeout=300,
        )
        if resp.status_code in (401, 403):
            raise CredentialError(
                f"judge endpoint rejected credentials (check {spec.auth_env_var or 'configuration'})"
            )
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

    return chat


def _judge_one(
    qid: str, chunk_id: str, query: str, chunk: str, chat: ChatFn, max_attempts: int
) -> JudgeVerdict:
    system, user = build_prompt(query, chunk)
    messages = [
        {"role": "system", "content": system},
        {"role": "user", "content": user},
    ]
    last_response = ""
    for attempt in range(1, max_attempts + 1):
        try:
            last_response = chat(messages)
        except Exception as e:
            last_response = f"[judge call failed: {e}]"
            continue
        verdict = parse_verdict(last_response)
        if verdict is not None:
            return JudgeVerdict(qid, chunk_id, verdict, last_response, attempt, "decided")
    return JudgeVerdict(qid, chunk_id, False, last_response, max_attempts, "undecided")


def judge_pool(
    pool: CandidatePool,
    query_texts: dict[str, str],
    chunk_texts: dict[str, str],
    chat: ChatFn,
    concurrency: int = 4,
    wal_path: str | Path | None = None,
    max_attempts: int = 3,
) -> tuple[Qrels, list[JudgeVerdict]]:
    """One verdict per pooled pair; qrels are the decided-relevant subset.

    With a write-ahead log path, verdicts already in the log are reused and
    only the remainder is judged, so a rerun over a complete log makes no
    calls at all.
    """
    pairs = pool.pairs()
    for qid, chunk_id in pairs:
        if qid not in query_texts:
            raise ContractError(f"no text for query {qid}")
        if chunk_id not in chunk_texts:
            raise ContractError(f"no text for chunk {chunk_id}")

    done: dict[tuple[str, str], JudgeVerdict] = {}
    if wal_path is not None and Path(wal_path).exists():
        for line in Path(wal_path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                v = JudgeVerdict.from_json(line)
                done[(v.query_id, v.chunk_id)] = v

    todo = [(q, c) for q, c in pairs if (q, c) not in done]
    wal_lock = threading.Lock()
    wal_file = open(wal_path, "a", encoding="utf-8") if wal_path is not None else None

    def work(pair: tuple[str, str]) -> JudgeVerdict:
        qid, chunk_id = pair
        verdict = _judge_one(
            qid, chunk_id, query_texts[qid], chunk_texts[chunk_id], chat, max_attempts
        )
        if wal_file is not None:
            with wal_lock:
                wal_file.write(verdict.to_json() + "\n")
                wal_file.flush()
        return verdict

    try:
        if concurrency > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=concurrency) as executor:
                fresh = list(executor.map(work, todo))
        else:
            fresh = [work(p) for p in todo]
    finally:
        if wal_file is not None:
            wal_file.close()

    for v in fresh:
        done[(v.query_id, v.chunk_id)] = v
    verdicts = [done[pair] for pair in pairs]

    qrels: Qrels = {}
    for v in verdicts:
        if v.status == "decided" and v.relevant:
            qrels.setdefault(v.query_id, {})[v.chunk_id] = 1
    return qrels, verdicts


def write_verdicts(verdicts: Iterable[JudgeVerdict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for v in verdicts:
            f.write(v.to_json() + "\n")


def undecided_review_rows(
    verdicts: Iterable[JudgeVerdict],
    query_texts: dict[str, str],
    chunk_texts: dict[str, str],
) -> list[dict]:
    rows = []
    for v in verdicts:
        if v.status == "undecided":
            rows.append(
                {
                    "query_id": v.query_id,
                    "chunk_id": v.chunk_id,
                    "query": query_texts.get(v.query_id, ""),
                    "chunk": chunk_texts.get(v.chunk_id, ""),
                    "last_response": v.raw_response,
                    "attempts": v.attempts,
                }
            )
    return rows
