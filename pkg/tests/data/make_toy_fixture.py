"""Regenerate the checked-in toy corpus and query log.

The fixture is frozen; rerun this only when deliberately changing it.
Docs are pseudo-English support articles (stopword-heavy so the language
heuristic passes). Most queries are contiguous word windows lifted from a
doc sentence, so the token-containment mock judge can label them against
the chunk that carries the sentence. The rest are cleaning-stage fodder:
duplicates, non-English strings, one-word and run-on queries.
"""

import json
from pathlib import Path

import numpy as np

STOP = "the a an is are was to of in on for with how what when where do does can my your this that".split()
TERMS = """webhook token sync dashboard workspace snapshot export import billing invoice
retention archive automation trigger schedule pipeline connector mapping field schema
permission role audit session timeout refresh rotate revoke scope sandbox replica
incident escalation priority queue backlog sprint milestone release rollback deploy
metric alert threshold digest summary transcript attachment thread mention reaction
template macro shortcut filter segment cohort funnel conversion churn seat quota
webhooks payload signature secret header retry idempotency cursor pagination limit
throttle burst window grant consent delegation profile avatar locale timezone
directory group membership provisioning deprovision lifecycle webhookv2 canary flag
experiment variant rollout freeze窗 maintenance region failover backup restore""".split()
TERMS = [t for t in TERMS if t.isascii()]


def sentence(rng):
    n = int(rng.integers(6, 13))
    words = []
    for _ in range(n):
        pool = STOP if rng.random() < 0.38 else TERMS
        words.append(pool[int(rng.integers(len(pool)))])
    return " ".join(words)


def document(rng):
    paragraphs = []
    for _ in range(int(rng.integers(2, 4))):
        sentences = [sentence(rng) for _ in range(int(rng.integers(2, 5)))]
        paragraphs.append(". ".join(sentences) + ".")
    return "\n\n".join(paragraphs)


def main():
    rng = np.random.default_rng(20240817)
    out = Path(__file__).parent

    docs = [{"doc_id": f"doc{i:03d}", "text": document(rng)} for i in range(50)]
    with open(out / "toy_corpus.jsonl", "w", encoding="utf-8") as f:
        for d in docs:
            f.write(json.dumps(d, ensure_ascii=False) + "\n")

    queries = []
    qn = 0

    def add(text):
        nonlocal qn
        queries.append({"id": f"q{qn:03d}", "text": text})
        qn += 1

    # windows lifted from doc sentences (judgeable by containment)
    for _ in range(70):
        doc = docs[int(rng.integers(len(docs)))]
        sentences = [s for p in doc["text"].split("\n\n") for s in p.split(". ")]
        s = sentences[int(rng.integers(len(sentences)))].rstrip(".").split()
        if len(s) < 4:
            continue
        width = int(rng.integers(3, min(12, len(s) + 1)))
        start = int(rng.integers(0, len(s) - width + 1))
        add(" ".join(s[start : start + width]))

    # exact duplicates of earlier queries
    for _ in range(8):
        add(queries[int(rng.integers(len(queries)))]["text"])
    # non-English (no stopwords at all)
    for _ in range(6):
        add(" ".join(TERMS[int(rng.integers(len(TERMS)))] for _ in range(5)))
    # length-filter fodder
    for _ in range(3):
        add(TERMS[int(rng.integers(len(TERMS)))])
    for _ in range(3):
        add(" ".join(sentence(rng) for _ in range(4)))

    order = rng.permutation(len(queries))
    with open(out / "toy_queries.jsonl", "w", encoding="utf-8") as f:
        for i in order:
            f.write(json.dumps(queries[int(i)], ensure_ascii=False) + "\n")
    print(f"wrote {len(docs)} docs, {len(queries)} queries")


if __name__ == "__main__":
    main()
