"""Dimension-tagged phrase lexicons and the interactive expansion session.

A lexicon maps dimension names to normalized phrase sets with per-phrase
provenance. An expansion session wraps a lexicon plus an embedding table,
serves ranked suggestions (query-driven or lexicon-driven), and journals
every accept/reject so the final lexicon can be replayed exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO

import numpy as np

from .embed import EmbeddingTable, UnknownPhraseError, neighbors
from .textprep import PhraseSequence, PhraseVocab

LEXICON_FORMAT_VERSION = 1

DEFAULT_DIMENSIONS = ("movement", "expectations", "practices", "heroes", "foes")


class LexiconError(Exception):
    pass


def normalize_phrase(phrase: str) -> str:
    """Lowercase and collapse space/hyphen/underscore runs to "_"."""
    cleaned = phrase.strip().lower()
    for ch in (" ", "-"):
        cleaned = cleaned.replace(ch, "_")
    while "__" in cleaned:
        cleaned = cleaned.replace("__", "_")
    return cleaned.strip("_")


@dataclass(frozen=True)
class Provenance:
    kind: str  # "seed" | "accepted"
    session: Optional[str] = None
    query: Optional[str] = None
    rank: Optional[int] = None

    def to_record(self) -> dict:
        rec = {"kind": self.kind}
        if self.kind == "accepted":
            rec.update({"session": self.session, "query": self.query, "rank": self.rank})
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Provenance":
        return cls(
            kind=rec["kind"],
            session=rec.get("session"),
            query=rec.get("query"),
            rank=rec.get("rank"),
        )


SEED = Provenance(kind="seed")


@dataclass
class Lexicon:
    dimensions: dict[str, set[str]] = field(default_factory=dict)
    provenance: dict[str, Provenance] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.provenance)

    @property
    def phrases(self) -> set[str]:
        return set(self.provenance)

    def dimensions_of(self, phrase: str) -> list[str]:
        phrase = normalize_phrase(phrase)
        return sorted(d for d, members in self.dimensions.items() if phrase in members)

    def add(self, phrase: str, dimensions: Iterable[str], provenance: Provenance) -> bool:
        """Insert a phrase; returns False (no-op) if already a member."""
        phrase = normalize_phrase(phrase)
        if not phrase:
            raise LexiconError("empty phrase")
        dims = [d.strip() for d in dimensions]
        if not dims or any(not d for d in dims):
            raise LexiconError("phrase needs at least one non-empty dimension")
        if phrase in self.provenance:
            return False
        for dim in dims:
            self.dimensions.setdefault(dim, set()).add(phrase)
        self.provenance[phrase] = provenance
        return True

    def copy(self) -> "Lexicon":
        return Lexicon(
            dimensions={d: set(m) for d, m in self.dimensions.items()},
            provenance=dict(self.provenance),
        )


def load_seed(stream: TextIO) -> Lexicon:
    """Parse a seed file of tab-separated `dimension<TAB>phrase` rows.

    The same phrase may appear under several dimensions; an exact duplicate
    (dimension, phrase) row is a conflict and aborts with the full list.
    """
    lexicon = Lexicon()
    seen: set[tuple[str, str]] = set()
    conflicts: list[str] = []
    rows = 0
    for line_number, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise LexiconError(f"line {line_number}: expected dimension<TAB>phrase")
        dim, phrase = parts[0].strip(), normalize_phrase(parts[1])
        if not dim:
            raise LexiconError(f"line {line_number}: empty dimension name")
        if not phrase:
            raise LexiconError(f"line {line_number}: empty phrase")
        key = (dim, phrase)
        if key in seen:
            conflicts.append(f"line {line_number}: duplicate row {dim!r}/{phrase!r}")
            continue
        seen.add(key)
        rows += 1
        if phrase in lexicon.provenance:
            lexicon.dimensions.setdefault(dim, set()).add(phrase)
        else:
            lexicon.add(phrase, [dim], SEED)
    if conflicts:
        raise LexiconError("conflicting seed rows:\n" + "\n".join(conflicts))
    if rows == 0:
        raise LexiconError("seed file contains no phrases")
    return lexicon


def export_canon(lexicon: Lexicon, stream: TextIO) -> None:
    """Versioned text export, one row per (dimension, phrase) membership."""
    header = {
        "format": "lexloop-lexicon",
        "version": LEXICON_FORMAT_VERSION,
        "phrases": len(lexicon),
    }
    stream.write("#" + json.dumps(header, sort_keys=True) + "\n")
    for dim in sorted(lexicon.dimensions):
        for phrase in sorted(lexicon.dimensions[dim]):
            prov = json.dumps(lexicon.provenance[phrase].to_record(), sort_keys=True)
            stream.write(f"{dim}\t{phrase}\t{prov}\n")


def load_canon(stream: TextIO) -> Lexicon:
    first = stream.readline()
    if not first.startswith("#"):
        raise LexiconError("missing canon header")
    header = json.loads(first[1:])
    if header.get("format") != "lexloop-lexicon":
        raise LexiconError("not a lexicon export")
    lexicon = Lexicon()
    for line in stream:
        line = line.rstrip("\n")
        if not line:
            continue
        dim, phrase, prov_json = line.split("\t", 2)
        prov = Provenance.from_record(json.loads(prov_json))
        if phrase in lexicon.provenance:
            lexicon.dimensions.setdefault(dim, set()).add(phrase)
        else:
            lexicon.add(phrase, [dim], prov)
    if len(lexicon) != header["phrases"]:
        raise LexiconError("canon export truncated")
    return lexicon


@dataclass
class Suggestion:
    phrase: str
    score: float
    evidence: list[str] = field(default_factory=list)  # comment ids


@dataclass
class SuggestResult:
    kind: str  # "suggestions" | "did_you_mean"
    items: list[Suggestion]
    query: Optional[str] = None


class EvidenceIndex:
    """phrase -> first few comment ids containing it (ascending id), so the
    UI shows the same sample comments on every run."""

    def __init__(self, sequences: Iterable[PhraseSequence], per_phrase: int = 5):
        self.per_phrase = per_phrase
        self._index: dict[str, list[str]] = {}
        for seq in sorted(sequences, key=lambda s: s.comment_id):
            for token in set(seq.tokens):
                bucket = self._index.setdefault(token, [])
                if len(bucket) < per_phrase:
                    bucket.append(seq.comment_id)

    def lookup(self, phrase: str) -> list[str]:
        return list(self._index.get(phrase, []))


class ExpansionSession:
    """Single-writer expansion session over one lexicon and one embedding."""

    def __init__(
        self,
        session_id: str,
        lexicon: Lexicon,
        table: EmbeddingTable,
        vocab: PhraseVocab,
        evidence: Optional[EvidenceIndex] = None,
    ):
        self.session_id = session_id
        self.lexicon = lexicon
        self.table = table
        self.vocab = vocab
        self.evidence = evidence
        self.rejected: set[str] = set()
        self.event_log: list[dict] = []
        self._last_result: Optional[SuggestResult] = None
        self._no_query_cache: Optional[list[Suggestion]] = None

    def _excluded_ids(self) -> set[int]:
        out: set[int] = set()
        for phrase in self.lexicon.phrases | self.rejected:
            pid = self.vocab.phrase_id(phrase)
            if pid is not None:
                out.add(pid)
        return out

    def _attach_evidence(self, items: list[Suggestion]) -> None:
        if self.evidence is None:
            return
        for item in items:
            item.evidence = self.evidence.lookup(item.phrase)

    def _member_rows(self) -> tuple[list[str], np.ndarray]:
        members = sorted(p for p in self.lexicon.phrases if self.vocab.phrase_id(p) is not None)
        rows = np.stack([self.table.rows[self.vocab.index[p]] for p in members]) if members else np.zeros((0, self.table.rank))
        return members, rows

    def _suggest_no_query(self, n: int) -> list[Suggestion]:
        if self._no_query_cache is not None:
            return self._no_query_cache[:n]
        members, _ = self._member_rows()
        exclude = self._excluded_ids()
        candidates: set[str] = set()
        for phrase in members:
            for cand, _score in neighbors(self.table, self.vocab, phrase, n=n, exclude_ids=exclude):
                candidates.add(cand)
        scored: list[Suggestion] = []
        member_matrix = self._member_rows()[1]
        if member_matrix.shape[0]:
            norms = np.linalg.norm(member_matrix, axis=1)
            for cand in candidates:
                vec = self.table.rows[self.vocab.index[cand]]
                vnorm = np.linalg.norm(vec)
                if vnorm == 0:
                    best = 0.0
                else:
                    with np.errstate(divide="ignore", invalid="ignore"):
                        sims = member_matrix @ vec / (norms * vnorm)
                    sims[~np.isfinite(sims)] = 0.0
                    best = float(sims.max()) if sims.size else 0.0
                scored.append(Suggestion(phrase=cand, score=best))
        scored.sort(key=lambda s: (-s.score, self.vocab.index[s.phrase]))
        self._no_query_cache = scored
        return scored[:n]

    def suggest(self, query: Optional[str] = None, n: int = 10) -> SuggestResult:
        """Ranked candidate phrases. With a query: its nearest non-member
        neighbors. Without: the union of every member's neighbor list,
        re-ranked by maximum cosine to any member."""
        if query is not None:
            normalized = normalize_phrase(query)
            try:
                ranked = neighbors(
                    self.table, self.vocab, normalized, n=n, exclude_ids=self._excluded_ids()
                )
            except UnknownPhraseError as exc:
                items = [Suggestion(phrase=p, score=0.0) for p in exc.suggestions]
                result = SuggestResult(kind="did_you_mean", items=items, query=normalized)
                self._last_result = result
                return result
            items = [Suggestion(phrase=p, score=s) for p, s in ranked]
            self._attach_evidence(items)
            result = SuggestResult(kind="suggestions", items=items, query=normalized)
        else:
            items = self._suggest_no_query(n)
            self._attach_evidence(items)
            result = SuggestResult(kind="suggestions", items=items, query=None)
        self._last_result = result
        return result

    def _provenance_for(self, phrase: str) -> Provenance:
        query, rank = None, None
        if self._last_result is not None and self._last_result.kind == "suggestions":
            for idx, item in enumerate(self._last_result.items):
                if item.phrase == phrase:
                    query, rank = self._last_result.query, idx + 1
                    break
        return Provenance(kind="accepted", session=self.session_id, query=query, rank=rank)

    def accept(self, phrase: str, dimensions: Iterable[str]) -> bool:
        """Add a phrase to the lexicon; returns False for an existing member
        (no-op warning semantics). Invalidates the no-query ranking cache."""
        normalized = normalize_phrase(phrase)
        if self.vocab.phrase_id(normalized) is None:
            raise LexiconError(f"phrase {normalized!r} is not in the vocabulary")
        dims = sorted(dimensions)
        provenance = self._provenance_for(normalized)
        added = self.lexicon.add(normalized, dims, provenance)
        if not added:
            return False
        self.rejected.discard(normalized)
        self.event_log.append(
            {
                "event": "accept",
                "phrase": normalized,
                "dimensions": dims,
                "session": provenance.session,
                "query": provenance.query,
                "rank": provenance.rank,
            }
        )
        self._no_query_cache = None
        return True

    def reject(self, phrase: str) -> None:
        """Suppress a phrase for this session only."""
        normalized = normalize_phrase(phrase)
        self.rejected.add(normalized)
        self.event_log.append({"event": "reject", "phrase": normalized})
        self._no_query_cache = None

    def save_log(self, stream: TextIO) -> None:
        for event in self.event_log:
            stream.write(json.dumps(event, sort_keys=True) + "\n")


def replay_log(seed: Lexicon, events: Iterable[dict]) -> Lexicon:
    """Apply an accept/reject event log to a fresh copy of the seed; the
    result is bit-identical to the lexicon the session produced (events carry
    the provenance the session recorded)."""
    lexicon = seed.copy()
    for idx, event in enumerate(events):
        if event["event"] == "accept":
            lexicon.add(
                event["phrase"],
                event["dimensions"],
                Provenance(
                    kind="accepted",
                    session=event.get("session"),
                    query=event.get("query"),
                    rank=event.get("rank"),
                ),
            )
        elif event["event"] == "reject":
            continue
        else:
            raise LexiconError(f"unknown event {event['event']!r} at index {idx}")
    return lexicon
