"""Text preparation: pronoun resolution over parent-child pairs, collocation
vocabulary learning, and phrase tokenization.

The resolver is a deterministic nearest-antecedent heuristic behind the
CorefResolver protocol so a heavier model can be plugged in without touching
callers. Collocations use a discounted pointwise association score over two
passes (bigrams, then trigrams on the merged stream).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Sequence, TextIO

from .corpus import PairContext

VOCAB_FORMAT_VERSION = 1

SINGULAR_PRONOUNS = {"he", "him", "his", "she", "her", "hers", "it", "its"}
PLURAL_PRONOUNS = {"they", "them", "their"}
PRONOUNS = SINGULAR_PRONOUNS | PLURAL_PRONOUNS

_WORD_RE = re.compile(r"[A-Za-z0-9_'][A-Za-z0-9_'\-]*")
_URL_RE = re.compile(r"https?://\S+|www\.\S+")
_MARKUP_RE = re.compile(r"[*_~`^\[\]()>#|\\]+")
_TOKEN_RE = re.compile(r"[a-z0-9_']+")


class TextPrepError(Exception):
    pass


@dataclass(frozen=True)
class Substitution:
    start: int
    end: int
    pronoun: str
    antecedent: str


@dataclass
class ResolvedText:
    comment_id: str
    text: str
    substitutions: list[Substitution] = field(default_factory=list)
    unresolved: int = 0


class CorefResolver(Protocol):
    name: str

    def resolve(self, pair: PairContext) -> ResolvedText: ...


def _candidate_runs(text: str) -> list[tuple[int, str]]:
    """Capitalized token runs, position-tagged; pronouns never qualify and
    anything but whitespace between tokens (e.g. sentence punctuation) breaks
    the run."""
    tokens = [(m.start(), m.end(), m.group()) for m in _WORD_RE.finditer(text)]
    runs: list[tuple[int, str]] = []
    current: list[tuple[int, str]] = []
    last_end = -1
    for start, end, tok in tokens:
        capitalized = tok[:1].isupper() and tok.lower() not in PRONOUNS
        contiguous = current and text[last_end:start].strip() == ""
        if capitalized and (not current or contiguous):
            current.append((start, tok))
        elif capitalized:
            runs.append((current[0][0], " ".join(t for _, t in current)))
            current = [(start, tok)]
        else:
            if current:
                runs.append((current[0][0], " ".join(t for _, t in current)))
                current = []
        last_end = end
    if current:
        runs.append((current[0][0], " ".join(t for _, t in current)))
    return runs


def _is_plural_marked(candidate: str, known_plural: frozenset[str]) -> bool:
    if candidate.lower() in known_plural:
        return True
    last = candidate.split()[-1]
    return last.lower().endswith("s")


class NearestAntecedentResolver:
    """Replace third-person pronouns with the nearest preceding capitalized
    run, scanning the child right-to-left and then the parent right-to-left.

    Plural pronouns only accept plural-marked antecedents (trailing "s" or a
    configured multi-entity name); anything unresolved is left intact and
    counted. Substitutions are applied progressively left-to-right, which
    makes the pass idempotent.
    """

    name = "nearest-antecedent"

    def __init__(
        self,
        known_entities: Iterable[str] = (),
        known_plural_entities: Iterable[str] = (),
    ) -> None:
        self.known_entities = frozenset(e.lower() for e in known_entities)
        self.known_plural = frozenset(e.lower() for e in known_plural_entities)

    def _entity_matches(self, text: str, before: int) -> list[tuple[int, str]]:
        if not self.known_entities:
            return []
        matches = []
        lowered = text.lower()
        for entity in self.known_entities:
            start = 0
            while True:
                idx = lowered.find(entity, start)
                if idx < 0 or idx >= before:
                    break
                matches.append((idx, text[idx:idx + len(entity)]))
                start = idx + 1
        return matches

    def _find_antecedent(
        self, child_text: str, before: int, parent_text: str, plural: bool
    ) -> Optional[str]:
        child_cands = [c for c in _candidate_runs(child_text) if c[0] < before]
        child_cands += self._entity_matches(child_text, before)
        parent_cands = _candidate_runs(parent_text)
        parent_cands += self._entity_matches(parent_text, len(parent_text) + 1)
        for pool in (child_cands, parent_cands):
            for _, candidate in sorted(pool, key=lambda c: -c[0]):
                if plural and not _is_plural_marked(candidate, self.known_plural):
                    continue
                return candidate
        return None

    def resolve(self, pair: PairContext) -> ResolvedText:
        parent_text = pair.parent.body if pair.parent is not None else ""
        text = pair.child.body
        substitutions: list[Substitution] = []
        unresolved = 0
        cursor = 0
        while True:
            match = _WORD_RE.search(text, cursor)
            if match is None:
                break
            token = match.group()
            if token.lower() not in PRONOUNS:
                cursor = match.end()
                continue
            antecedent = self._find_antecedent(
                text, match.start(), parent_text, token.lower() in PLURAL_PRONOUNS
            )
            if antecedent is None:
                unresolved += 1
                cursor = match.end()
                continue
            text = text[:match.start()] + antecedent + text[match.end():]
            substitutions.append(
                Substitution(
                    start=match.start(),
                    end=match.start() + len(antecedent),
                    pronoun=token,
                    antecedent=antecedent,
                )
            )
            cursor = match.start() + len(antecedent)
        return ResolvedText(
            comment_id=pair.child.id,
            text=text,
            substitutions=substitutions,
            unresolved=unresolved,
        )


class IdentityResolver:
    """No-op resolver for pipelines that skip coreference."""

    name = "identity"

    def resolve(self, pair: PairContext) -> ResolvedText:
        return ResolvedText(comment_id=pair.child.id, text=pair.child.body)


def base_tokens(text: str) -> list[str]:
    """Lowercase word tokens with URLs and markup stripped."""
    text = _URL_RE.sub(" ", text)
    text = _MARKUP_RE.sub(" ", text)
    return _TOKEN_RE.findall(text.lower())


@dataclass
class MergeRule:
    left: str
    right: str
    merged: str
    score: float
    count: int = 0  # support: merged occurrences at the pass that formed it


@dataclass
class PhraseVocab:
    phrases: list[str]
    counts: dict[str, int]
    bigram_rules: dict[tuple[str, str], MergeRule]
    trigram_rules: dict[tuple[str, str], MergeRule]
    config: dict

    def __post_init__(self) -> None:
        self.index = {p: i for i, p in enumerate(self.phrases)}

    def __len__(self) -> int:
        return len(self.phrases)

    def phrase_id(self, phrase: str) -> Optional[int]:
        return self.index.get(phrase)


@dataclass(frozen=True)
class PhraseSequence:
    comment_id: str
    tokens: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)


def _merge_stream(tokens: Sequence[str], rules: dict[tuple[str, str], MergeRule]) -> list[str]:
    """Greedy left-to-right merge: the leftmost applicable rule wins."""
    out: list[str] = []
    i = 0
    while i < len(tokens):
        if i + 1 < len(tokens):
            rule = rules.get((tokens[i], tokens[i + 1]))
            if rule is not None:
                out.append(rule.merged)
                i += 2
                continue
        out.append(tokens[i])
        i += 1
    return out


def _pass_rules(
    token_streams: list[list[str]],
    min_count: int,
    score_threshold: float,
    discount: float,
    required_left: Optional[set[str]] = None,
) -> dict[tuple[str, str], MergeRule]:
    """Score adjacent pairs: (count(a,b) - discount) * N / (count(a) * count(b)).

    When required_left is given (trigram pass), only pairs of a merged bigram
    followed by a plain unigram qualify.
    """
    unigram: dict[str, int] = {}
    pair: dict[tuple[str, str], int] = {}
    total = 0
    for tokens in token_streams:
        total += len(tokens)
        for tok in tokens:
            unigram[tok] = unigram.get(tok, 0) + 1
        for a, b in zip(tokens, tokens[1:]):
            pair[(a, b)] = pair.get((a, b), 0) + 1
    rules: dict[tuple[str, str], MergeRule] = {}
    for (a, b), count in pair.items():
        if count < min_count:
            continue
        if required_left is not None and (a not in required_left or b in required_left):
            continue
        score = (count - discount) * total / (unigram[a] * unigram[b])
        if score >= score_threshold:
            rules[(a, b)] = MergeRule(left=a, right=b, merged=f"{a}_{b}", score=score)
    return rules


def learn_vocab(
    texts: Iterable[ResolvedText],
    min_count: int = 25,
    score_threshold: float = 10.0,
    discount: float = 5.0,
) -> PhraseVocab:
    """Two merge passes over the corpus: bigrams, then trigrams built from a
    pass-one bigram followed by a unigram.

    Multi-gram rules whose frequency in the final merged stream falls below
    min_count are pruned and the stream re-merged, so every retained
    multi-gram honours the threshold.
    """
    streams = [base_tokens(t.text) for t in texts if t.text.strip()]
    streams = [s for s in streams if s]
    if not streams:
        raise TextPrepError("cannot learn a vocabulary from an empty corpus")

    bigram_rules = _pass_rules(streams, min_count, score_threshold, discount)
    merged_once = [_merge_stream(s, bigram_rules) for s in streams]
    bigram_names = {r.merged for r in bigram_rules.values()}
    trigram_rules = _pass_rules(
        merged_once, min_count, score_threshold, discount, required_left=bigram_names
    )

    def stream_counts(token_streams: list[list[str]]) -> dict[str, int]:
        counts: dict[str, int] = {}
        for tokens in token_streams:
            for tok in tokens:
                counts[tok] = counts.get(tok, 0) + 1
        return counts

    # Greedy merging over overlapping pairs can leave a rule with less
    # realized support than its pair count suggested; prune such rules. A
    # bigram's support is counted before the trigram pass so bigrams consumed
    # by trigrams keep their standing.
    while True:
        once = [_merge_stream(s, bigram_rules) for s in streams]
        once_counts = stream_counts(once)
        final = [_merge_stream(s, trigram_rules) for s in once]
        final_counts = stream_counts(final)
        dropped = False
        for key, rule in list(bigram_rules.items()):
            rule.count = once_counts.get(rule.merged, 0)
            if rule.count < min_count:
                del bigram_rules[key]
                dropped = True
        bigram_names = {r.merged for r in bigram_rules.values()}
        for key, rule in list(trigram_rules.items()):
            rule.count = final_counts.get(rule.merged, 0)
            if rule.count < min_count or key[0] not in bigram_names:
                del trigram_rules[key]
                dropped = True
        if not dropped:
            break

    phrases: list[str] = []
    seen: set[str] = set()
    for tokens in final:
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                phrases.append(tok)
    return PhraseVocab(
        phrases=phrases,
        counts=final_counts,
        bigram_rules=bigram_rules,
        trigram_rules=trigram_rules,
        config={
            "min_count": min_count,
            "score_threshold": score_threshold,
            "discount": discount,
        },
    )


def tokenize(text: ResolvedText, vocab: PhraseVocab) -> PhraseSequence:
    """Apply the vocabulary's merge rules greedily; out-of-vocab unigrams are
    kept so window geometry and frequency weighting stay faithful."""
    tokens = base_tokens(text.text)
    tokens = _merge_stream(tokens, vocab.bigram_rules)
    tokens = _merge_stream(tokens, vocab.trigram_rules)
    return PhraseSequence(comment_id=text.comment_id, tokens=tuple(tokens))


def save_vocab(vocab: PhraseVocab, stream: TextIO) -> None:
    """Versioned text snapshot: phrases+counts, then scored merge rules."""
    header = {
        "format": "lexloop-vocab",
        "version": VOCAB_FORMAT_VERSION,
        "phrases": len(vocab.phrases),
        "config": vocab.config,
    }
    stream.write(json.dumps(header, sort_keys=True) + "\n")
    for phrase in vocab.phrases:
        stream.write(f"P\t{phrase}\t{vocab.counts.get(phrase, 0)}\n")
    for kind, rules in (("B", vocab.bigram_rules), ("T", vocab.trigram_rules)):
        for (a, b), rule in sorted(rules.items()):
            stream.write(f"{kind}\t{a}\t{b}\t{rule.score:.12g}\t{rule.count}\n")


def load_vocab(stream: TextIO) -> PhraseVocab:
    header = json.loads(stream.readline())
    if header.get("format") != "lexloop-vocab":
        raise TextPrepError("not a vocabulary snapshot")
    phrases: list[str] = []
    counts: dict[str, int] = {}
    bigram_rules: dict[tuple[str, str], MergeRule] = {}
    trigram_rules: dict[tuple[str, str], MergeRule] = {}
    for line in stream:
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if parts[0] == "P":
            phrases.append(parts[1])
            counts[parts[1]] = int(parts[2])
        elif parts[0] in ("B", "T"):
            a, b, score = parts[1], parts[2], float(parts[3])
            count = int(parts[4]) if len(parts) > 4 else 0
            rule = MergeRule(left=a, right=b, merged=f"{a}_{b}", score=score, count=count)
            (bigram_rules if parts[0] == "B" else trigram_rules)[(a, b)] = rule
        else:
            raise TextPrepError(f"unknown vocab record {parts[0]!r}")
    if len(phrases) != header["phrases"]:
        raise TextPrepError("vocabulary snapshot truncated")
    return PhraseVocab(
        phrases=phrases,
        counts=counts,
        bigram_rules=bigram_rules,
        trigram_rules=trigram_rules,
        config=header.get("config", {}),
    )
