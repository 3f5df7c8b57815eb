"""Shared pipeline helpers: deterministic stage functions over a workspace
plus the in-memory state the HTTP API serves (sessions, highlight matcher,
journal)."""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .. import corpus as corpus_mod
from .. import embed as embed_mod
from .. import features as features_mod
from .. import lexicon as lexicon_mod
from .. import textprep
from ..learner import ActiveSession
from ..lexicon import ExpansionSession, Lexicon, normalize_phrase

ANNOTATION_GUIDELINES = """\
Label each comment by the stance it discloses toward the community's shared
worldview:
- belief: part of the message supports the movement, its figures, or its
  practices, shows interest in its activities, or strongly opposes its
  declared enemies. Belief in unrelated ideas does not count.
- dissonance: part of the message contradicts, doubts, or expresses
  uncertainty about the shared worldview, argues against members defending
  it, or prefers alternatives to it. Confronting an individual user without
  reference to the worldview does not count.
- neutral: no reference to belief in or dissonance with the worldview.
Skip a comment you cannot interpret with confidence.
"""


@dataclass(frozen=True)
class HighlightSpan:
    start: int
    end: int
    phrase: str
    dimensions: tuple[str, ...]

    def to_record(self) -> dict:
        return {
            "start": self.start,
            "end": self.end,
            "phrase": self.phrase,
            "dimensions": list(self.dimensions),
        }


class HighlightMatcher:
    """Find canon-phrase occurrences in raw comment text.

    Phrase parts may be separated by spaces, hyphens, or underscores in the
    text; matches are case-insensitive, word-bounded, and resolved longest
    match first so overlaps never nest."""

    def __init__(self, lexicon: Lexicon):
        self.lexicon = lexicon
        self._patterns: list[tuple[str, re.Pattern]] = []
        for phrase in sorted(lexicon.phrases):
            parts = [re.escape(p) for p in phrase.split("_")]
            pattern = re.compile(
                r"(?<![0-9A-Za-z_])" + r"[\s_\-]+".join(parts) + r"(?![0-9A-Za-z_])",
                re.IGNORECASE,
            )
            self._patterns.append((phrase, pattern))

    def spans(self, text: str) -> list[HighlightSpan]:
        raw: list[tuple[int, int, str]] = []
        for phrase, pattern in self._patterns:
            for match in pattern.finditer(text):
                raw.append((match.start(), match.end(), phrase))
        raw.sort(key=lambda item: (item[0], -(item[1] - item[0]), item[2]))
        out: list[HighlightSpan] = []
        cursor = -1
        for start, end, phrase in raw:
            if start <= cursor:
                continue
            out.append(
                HighlightSpan(
                    start=start,
                    end=end,
                    phrase=phrase,
                    dimensions=tuple(self.lexicon.dimensions_of(phrase)),
                )
            )
            cursor = end - 1
        return out


def resolve_corpus(
    corp: corpus_mod.Corpus, resolver: Optional[textprep.CorefResolver] = None
) -> list[textprep.ResolvedText]:
    """Run coreference resolution over every parent-child pair; comments with
    empty or deleted bodies pass through untouched."""
    resolver = resolver or textprep.NearestAntecedentResolver()
    trees = corpus_mod.build_trees(corp)
    resolved: list[textprep.ResolvedText] = []
    for tree in trees.all_trees():
        for pair in corpus_mod.pairs(tree):
            if pair.child.empty_text:
                resolved.append(textprep.ResolvedText(comment_id=pair.child.id, text=""))
            else:
                resolved.append(resolver.resolve(pair))
    return resolved


def tokenize_corpus(
    resolved: list[textprep.ResolvedText], vocab: textprep.PhraseVocab
) -> dict[str, textprep.PhraseSequence]:
    return {r.comment_id: textprep.tokenize(r, vocab) for r in resolved}


def parent_map(corp: corpus_mod.Corpus) -> dict[str, Optional[corpus_mod.Comment]]:
    return {
        c.id: (corp.get(c.parent_id) if c.parent_id else None)
        for c in corp
    }


@dataclass
class ServiceState:
    """Everything the single-session HTTP API serves."""

    corpus: corpus_mod.Corpus
    parents: dict[str, Optional[corpus_mod.Comment]]
    lexicon_session: Optional[ExpansionSession] = None
    annotate_session: Optional[ActiveSession] = None
    highlighter: Optional[HighlightMatcher] = None
    artifact_hashes: dict[str, str] = field(default_factory=dict)
    journal_path: Optional[Path] = None
    guidelines: str = ANNOTATION_GUIDELINES
    lock: threading.Lock = field(default_factory=threading.Lock)
    pending_id: Optional[str] = None

    def journal(self, op: str, payload: dict) -> None:
        if self.journal_path is None:
            return
        with open(self.journal_path, "a") as fh:
            fh.write(json.dumps({"op": op, **payload}, sort_keys=True) + "\n")

    def refresh_highlighter(self) -> None:
        if self.lexicon_session is not None:
            self.highlighter = HighlightMatcher(self.lexicon_session.lexicon)

    def next_pending(self) -> Optional[str]:
        """Idempotent peek: the pending comment only advances on label/skip."""
        if self.annotate_session is None:
            return None
        if self.pending_id is None:
            self.pending_id = self.annotate_session.next_to_label()
        return self.pending_id


def replay_journal(state: ServiceState, journal_path: Path) -> None:
    """Re-apply accept/reject/label/skip events to a fresh state; the
    resulting lexicon and label state match the journaled session exactly."""
    with open(journal_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            event = json.loads(line)
            op = event["op"]
            if op == "accept" and state.lexicon_session:
                state.lexicon_session.accept(event["phrase"], event["dimensions"])
            elif op == "reject" and state.lexicon_session:
                state.lexicon_session.reject(event["phrase"])
            elif op == "label" and state.annotate_session:
                state.annotate_session.submit_label(event["comment_id"], event["label"])
            elif op == "skip" and state.annotate_session:
                state.annotate_session.skip(event["comment_id"])
    state.refresh_highlighter()


def comment_payload(state: ServiceState, comment_id: str) -> Optional[dict]:
    comment = state.corpus.get(comment_id)
    if comment is None:
        return None
    parent = state.parents.get(comment_id)
    spans = state.highlighter.spans(comment.body) if state.highlighter else []
    parent_spans = (
        state.highlighter.spans(parent.body) if (state.highlighter and parent) else []
    )
    return {
        "comment": comment.to_record(),
        "parent": parent.to_record() if parent else None,
        "highlights": [s.to_record() for s in spans],
        "parent_highlights": [s.to_record() for s in parent_spans],
    }
