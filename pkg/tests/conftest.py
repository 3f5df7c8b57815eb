"""Shared fixture builders for the test suite."""

from __future__ import annotations

import json

import numpy as np
import pytest

from lexloop.corpus import Comment, Corpus, ingest
from lexloop.textprep import PhraseSequence, ResolvedText, learn_vocab


def make_comment(
    cid: str,
    body: str = "hello world",
    parent_id: str | None = None,
    created_at: int = 0,
    score: int = 0,
    author: str = "user",
    community: str = "main",
    thread_id: str | None = None,
) -> Comment:
    kind = "post" if parent_id is None else "comment"
    return Comment(
        id=cid,
        parent_id=parent_id,
        thread_id=thread_id or cid,
        community=community,
        author=author,
        created_at=created_at,
        body=body,
        score=score,
        kind=kind,
    )


def corpus_from(comments: list[Comment]) -> Corpus:
    return Corpus(comments={c.id: c for c in comments})


def ingest_lines(records: list[dict]) -> Corpus:
    return ingest([json.dumps(rec) for rec in records])


@pytest.fixture
def chain_corpus() -> Corpus:
    return corpus_from(
        [
            make_comment("a", body="Post body", created_at=1),
            make_comment("b", body="first reply", parent_id="a", created_at=2, thread_id="a"),
            make_comment("c", body="second reply", parent_id="b", created_at=3, thread_id="a"),
        ]
    )


def alias_corpus(
    n_docs: int = 2000,
    pairs: int = 5,
    seed: int = 0,
    n_contexts: int = 30,
    context_pool: int = 120,
) -> list[ResolvedText]:
    """Planted seed/alias corpus: each seed phrase and its alias draw contexts
    from the same private pool, so their co-occurrence rows nearly coincide."""
    rng = np.random.default_rng(seed)
    pools = [
        [f"topic{p}word{i}" for i in range(n_contexts)] for p in range(pairs)
    ]
    fillers = [f"filler{i}" for i in range(context_pool)]
    docs = []
    for d in range(n_docs):
        p = d % pairs
        name = f"seed{p}" if (d // pairs) % 2 == 0 else f"alias{p}"
        ctx = rng.choice(pools[p], size=4, replace=False)
        pad = rng.choice(fillers, size=2, replace=False)
        docs.append(ResolvedText(f"doc{d:05d}", f"{name} {' '.join(ctx)} {' '.join(pad)}"))
    return docs


def unigram_vocab(docs: list[ResolvedText]):
    """Vocabulary with no merges (thresholds unattainable)."""
    return learn_vocab(docs, min_count=10**9, score_threshold=1e18)


def sequences_for(docs, vocab) -> list[PhraseSequence]:
    from lexloop.textprep import tokenize

    return [tokenize(d, vocab) for d in docs]
