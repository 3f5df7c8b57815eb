"""Per-comment feature extraction across six families: canon phrase rates,
category-lexicon rates, an integrative-complexity proxy, credibility cues,
community feedback, and SIF document embeddings.

The slot layout is fixed by the canon and category lexica at schema build
time; every matrix file embeds the schema hash so mismatched artifacts are
refused instead of silently misaligned.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Optional, Protocol, Sequence, TextIO

import numpy as np

from .corpus import Comment
from .embed import EmbeddingTable
from .lexicon import Lexicon, normalize_phrase
from .textprep import PhraseSequence, PhraseVocab, base_tokens

MATRIX_FORMAT_VERSION = 1
CATEGORY_COUNT = 19
SIF_DIMENSIONS = 50

CREDIBILITY_SLOTS = (
    "booster",
    "hedge",
    "modal",
    "evidential",
    "sentiment_positive",
    "sentiment_negative",
    "quotation_count",
    "question_count",
)

_SENTENCE_SPLIT = re.compile(r"[.!?;]+")
_QUESTION_RE = re.compile(r"\?+")

DIFFERENTIATION_CONNECTIVES = ("but", "however", "although", "on the other hand")
INTEGRATION_CONNECTIVES = ("therefore", "thus", "overall", "taken together")


class FeatureError(Exception):
    pass


@dataclass(frozen=True)
class Slot:
    name: str
    family: str  # canon | category | ic | credibility | feedback | sif
    normalization: str  # rate_per_100 | raw | scale_1_7 | unit | count | embedding


@dataclass
class FeatureSchema:
    slots: list[Slot]

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def hash(self) -> str:
        digest = hashlib.sha256()
        for slot in self.slots:
            digest.update(f"{slot.name}|{slot.family}|{slot.normalization}\n".encode("utf-8"))
        return digest.hexdigest()

    def family_sizes(self) -> dict[str, int]:
        sizes: dict[str, int] = {}
        for slot in self.slots:
            sizes[slot.family] = sizes.get(slot.family, 0) + 1
        return sizes


@dataclass
class CategoryLexicon:
    name: str
    patterns: tuple[str, ...]  # literal words or terminal-wildcard "ador*"

    def __post_init__(self) -> None:
        if not self.patterns:
            raise FeatureError(f"category {self.name!r} has no patterns")
        for pat in self.patterns:
            star = pat.find("*")
            if star >= 0 and star != len(pat) - 1:
                raise FeatureError(f"wildcard must be terminal in {pat!r}")

    def matches(self, token: str) -> bool:
        for pat in self.patterns:
            if pat.endswith("*"):
                if token.startswith(pat[:-1]):
                    return True
            elif token == pat:
                return True
        return False


@dataclass
class CueLists:
    """Word lists behind the credibility-cue family; weights only matter for
    the two sentiment slots."""

    booster: frozenset[str]
    hedge: frozenset[str]
    modal: frozenset[str]
    evidential: frozenset[str]
    valence: dict[str, float]  # word -> signed weight


DEFAULT_CUE_LISTS = CueLists(
    booster=frozenset(
        "actually evidently clearly obviously definitely certainly undoubtedly indeed truly always never".split()
    ),
    hedge=frozenset(
        "maybe perhaps possibly apparently somewhat arguably likely presumably roughly seemingly".split()
    ),
    modal=frozenset(
        "might could would should may must hypothetical improbable probable can".split()
    ),
    evidential=frozenset(
        "know guess think believe hear see feel suggest claim report".split()
    ),
    valence={
        "good": 1.0, "great": 1.0, "love": 1.0, "trust": 0.8, "hope": 0.6, "win": 0.8,
        "true": 0.5, "best": 1.0, "happy": 1.0, "right": 0.4,
        "bad": -1.0, "evil": -1.0, "corrupt": -1.0, "fail": -0.8, "fake": -0.8,
        "wrong": -0.6, "lie": -1.0, "worst": -1.0, "hate": -1.0, "fraud": -1.0,
    },
)


class IcScorer(Protocol):
    name: str

    def score(self, text: str) -> float: ...


class ConnectiveIcScorer:
    """Proxy for integrative complexity on the 1..7 scale: differentiation
    connectives lift the score, integration connectives lift it further only
    when differentiation is present."""

    name = "connective-rate"

    def __init__(
        self,
        differentiation: Sequence[str] = DIFFERENTIATION_CONNECTIVES,
        integration: Sequence[str] = INTEGRATION_CONNECTIVES,
    ):
        self.differentiation = tuple(differentiation)
        self.integration = tuple(integration)

    @staticmethod
    def _phrase_count(text: str, phrases: Sequence[str]) -> int:
        total = 0
        for phrase in phrases:
            total += len(re.findall(rf"\b{re.escape(phrase)}\b", text))
        return total

    def score(self, text: str) -> float:
        lowered = text.lower()
        sentences = [s for s in _SENTENCE_SPLIT.split(lowered) if s.strip()]
        if not sentences:
            return 1.0
        diff_rate = self._phrase_count(lowered, self.differentiation) / len(sentences)
        integ_rate = self._phrase_count(lowered, self.integration) / len(sentences)
        value = 1.0 + 3.0 * min(1.0, diff_rate)
        if diff_rate > 0:
            value += 3.0 * min(1.0, integ_rate)
        return max(1.0, min(7.0, value))


def build_schema(canon: Lexicon, categories: Sequence[CategoryLexicon]) -> FeatureSchema:
    """Slot order: canon phrases (sorted), categories (file order), IC,
    credibility cues, feedback, SIF dimensions."""
    if len(categories) != CATEGORY_COUNT:
        raise FeatureError(
            f"expected {CATEGORY_COUNT} category lexica, got {len(categories)}"
        )
    slots = [Slot(f"canon:{p}", "canon", "rate_per_100") for p in sorted(canon.phrases)]
    slots += [Slot(f"category:{c.name}", "category", "rate_per_100") for c in categories]
    slots.append(Slot("ic", "ic", "scale_1_7"))
    for name in CREDIBILITY_SLOTS:
        norm = "count" if name.endswith("_count") else ("unit" if name.startswith("sentiment") else "rate_per_100")
        slots.append(Slot(f"cred:{name}", "credibility", norm))
    slots.append(Slot("feedback:score", "feedback", "raw"))
    slots.append(Slot("feedback:synchronicity", "feedback", "raw"))
    slots += [Slot(f"sif:{i}", "sif", "embedding") for i in range(SIF_DIMENSIONS)]
    return FeatureSchema(slots=slots)


def _phrase_parts(phrase: str) -> tuple[str, ...]:
    return tuple(phrase.split("_"))


def canon_counts(seq: PhraseSequence, canon: Lexicon) -> dict[str, float]:
    """Occurrences per 100 tokens for every canon phrase, surface-form only.

    A multi-part phrase matches either its single merged token or the same
    parts as consecutive tokens; no stemming (the canon keeps deliberate
    misspellings)."""
    n_tokens = len(seq.tokens)
    rates: dict[str, float] = {p: 0.0 for p in canon.phrases}
    if n_tokens == 0:
        return rates
    for phrase in canon.phrases:
        parts = _phrase_parts(phrase)
        count = 0
        if len(parts) == 1:
            count = sum(1 for tok in seq.tokens if tok == phrase)
        else:
            width = len(parts)
            for i in range(n_tokens):
                if seq.tokens[i] == phrase:
                    count += 1
                elif i + width <= n_tokens and tuple(seq.tokens[i:i + width]) == parts:
                    count += 1
        rates[phrase] = 100.0 * count / n_tokens
    return rates


def category_counts(text: str, categories: Sequence[CategoryLexicon]) -> list[float]:
    """Per-100-token match rates for the configured category lexica."""
    if len(categories) != CATEGORY_COUNT:
        raise FeatureError(
            f"expected {CATEGORY_COUNT} category lexica, got {len(categories)}"
        )
    tokens = base_tokens(text)
    if not tokens:
        return [0.0] * len(categories)
    out = []
    for cat in categories:
        hits = sum(1 for tok in tokens if cat.matches(tok))
        out.append(100.0 * hits / len(tokens))
    return out


def ic_score(text: str, scorer: Optional[IcScorer] = None) -> float:
    scorer = scorer or ConnectiveIcScorer()
    if not text.strip():
        return 1.0
    value = scorer.score(text)
    return max(1.0, min(7.0, value))


def credibility_cues(text: str, cues: CueLists = DEFAULT_CUE_LISTS) -> list[float]:
    """Eight cue slots: four per-100-token rates, two unit-interval valence
    sums, paired-quote count plus blockquote lines, and question count."""
    tokens = base_tokens(text)
    n = len(tokens)

    def rate(words: frozenset[str]) -> float:
        if n == 0:
            return 0.0
        return 100.0 * sum(1 for t in tokens if t in words) / n

    pos = sum(w for t in tokens if (w := cues.valence.get(t, 0.0)) > 0)
    neg = sum(-w for t in tokens if (w := cues.valence.get(t, 0.0)) < 0)
    sentiment_pos = min(1.0, pos / n) if n else 0.0
    sentiment_neg = min(1.0, neg / n) if n else 0.0

    quotes = text.count('"') // 2 + min(text.count("“"), text.count("”"))
    quotes += sum(1 for line in text.splitlines() if line.lstrip().startswith(">"))
    questions = len(_QUESTION_RE.findall(text))

    return [
        rate(cues.booster),
        rate(cues.hedge),
        rate(cues.modal),
        rate(cues.evidential),
        sentiment_pos,
        sentiment_neg,
        float(quotes),
        float(questions),
    ]


def feedback(comment: Comment, parent: Optional[Comment]) -> tuple[float, float, bool]:
    """(score, score - parent score, parent_missing). Missing parents pin
    synchronicity at 0 so root posts stay unbiased."""
    if parent is None:
        return float(comment.score), 0.0, True
    return float(comment.score), float(comment.score - parent.score), False


@dataclass
class SifModel:
    """Frozen weighting for SIF document vectors: per-phrase smooth inverse
    frequencies over a 50-d embedding, plus the corpus common component."""

    table: EmbeddingTable
    vocab: PhraseVocab
    weights: dict[str, float]
    common_component: Optional[np.ndarray] = None

    @classmethod
    def build(cls, table: EmbeddingTable, vocab: PhraseVocab, a: float = 1e-3) -> "SifModel":
        if table.rank != SIF_DIMENSIONS:
            raise FeatureError(f"SIF embedding table must have rank {SIF_DIMENSIONS}")
        total = sum(vocab.counts.get(p, 0) for p in vocab.phrases)
        weights = {}
        for phrase in vocab.phrases:
            p_w = vocab.counts.get(phrase, 0) / total if total else 0.0
            weights[phrase] = a / (a + p_w)
        return cls(table=table, vocab=vocab, weights=weights)

    def raw_vector(self, seq: PhraseSequence) -> np.ndarray:
        vec = np.zeros(SIF_DIMENSIONS)
        if len(seq.tokens) == 0:
            return vec
        for tok in seq.tokens:
            pid = self.vocab.phrase_id(tok)
            if pid is None:
                continue
            vec += self.weights.get(tok, 1.0) * self.table.rows[pid]
        return vec / len(seq.tokens)

    def fit_common_component(self, sequences: Iterable[PhraseSequence]) -> np.ndarray:
        """First principal direction of the raw document vectors, found from
        the 50x50 Gram matrix; sign anchored for determinism."""
        matrix = np.stack([self.raw_vector(s) for s in sequences])
        gram = matrix.T @ matrix
        eigvals, eigvecs = np.linalg.eigh(gram)
        component = eigvecs[:, -1]
        anchor = int(np.argmax(np.abs(component)))
        if component[anchor] < 0:
            component = -component
        self.common_component = component
        return component

    def vector(self, seq: PhraseSequence) -> np.ndarray:
        vec = self.raw_vector(seq)
        if self.common_component is not None and np.any(vec):
            u = self.common_component
            vec = vec - (vec @ u) * u
        return vec


def sif_embedding(seq: PhraseSequence, model: SifModel) -> np.ndarray:
    return model.vector(seq)


@dataclass
class FeatureMatrix:
    schema_hash: str
    comment_ids: list[str]
    values: np.ndarray  # (n_comments, n_slots)

    def row(self, comment_id: str) -> np.ndarray:
        return self.values[self.comment_ids.index(comment_id)]


@dataclass
class ExtractionContext:
    canon: Lexicon
    categories: list[CategoryLexicon]
    cues: CueLists
    sif: SifModel
    scorer: IcScorer
    schema: FeatureSchema = field(init=False)

    def __post_init__(self) -> None:
        self.schema = build_schema(self.canon, self.categories)


def extract_row(
    ctx: ExtractionContext,
    comment: Comment,
    parent: Optional[Comment],
    seq: PhraseSequence,
) -> np.ndarray:
    """One comment's feature vector in schema slot order. Comments flagged
    empty_text keep feedback slots live but zero out the text families."""
    empty = comment.empty_text
    text = "" if empty else comment.body
    canon_rates = canon_counts(seq if not empty else PhraseSequence(comment.id, ()), ctx.canon)
    values = [canon_rates[p] for p in sorted(ctx.canon.phrases)]
    values += category_counts(text, ctx.categories)
    values.append(ic_score(text, ctx.scorer))
    values += credibility_cues(text, ctx.cues)
    score, synchronicity, _missing = feedback(comment, parent)
    values += [score, synchronicity]
    sif_vec = ctx.sif.vector(seq) if not empty else np.zeros(SIF_DIMENSIONS)
    values += list(sif_vec)
    row = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(row)):
        raise FeatureError(f"non-finite feature values for comment {comment.id}")
    return row


def extract_all(
    ctx: ExtractionContext,
    comments: Sequence[Comment],
    parents: dict[str, Optional[Comment]],
    sequences: dict[str, PhraseSequence],
) -> FeatureMatrix:
    """Feature matrix over the given comments; rows follow input order."""
    rows = []
    ids = []
    for comment in comments:
        seq = sequences.get(comment.id, PhraseSequence(comment.id, ()))
        rows.append(extract_row(ctx, comment, parents.get(comment.id), seq))
        ids.append(comment.id)
    values = np.vstack(rows) if rows else np.zeros((0, len(ctx.schema)))
    return FeatureMatrix(schema_hash=ctx.schema.hash, comment_ids=ids, values=values)


def load_category_file(stream: TextIO) -> list[CategoryLexicon]:
    """Parse `category: word1 word2 wor*` lines."""
    out = []
    for line in stream:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, _, words = line.partition(":")
        patterns = tuple(w for w in words.split() if w)
        out.append(CategoryLexicon(name=name.strip(), patterns=patterns))
    return out


def default_categories() -> list[CategoryLexicon]:
    """The shipped 19-category stand-in lexicon."""
    from importlib import resources

    ref = resources.files("lexloop.data").joinpath("categories.txt")
    with ref.open("r") as fh:
        return load_category_file(fh)


def load_cue_file(stream: TextIO) -> CueLists:
    """Cue lists share the category file format; valence entries use
    word=weight tokens."""
    sections: dict[str, list[str]] = {}
    for line in stream:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, _, words = line.partition(":")
        sections[name.strip()] = [w for w in words.split() if w]
    valence = {}
    for item in sections.get("valence", []):
        word, _, weight = item.partition("=")
        valence[word] = float(weight) if weight else 1.0
    return CueLists(
        booster=frozenset(sections.get("booster", [])),
        hedge=frozenset(sections.get("hedge", [])),
        modal=frozenset(sections.get("modal", [])),
        evidential=frozenset(sections.get("evidential", [])),
        valence=valence,
    )


def save_matrix(matrix: FeatureMatrix, stream: BinaryIO) -> None:
    header = {
        "format": "lexloop-features",
        "version": MATRIX_FORMAT_VERSION,
        "schema_hash": matrix.schema_hash,
        "count": len(matrix.comment_ids),
        "slots": int(matrix.values.shape[1]),
        "ids": matrix.comment_ids,
    }
    stream.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
    stream.write(np.ascontiguousarray(matrix.values, dtype="<f8").tobytes())


def load_matrix(stream: BinaryIO, expected_schema_hash: Optional[str] = None) -> FeatureMatrix:
    header = json.loads(stream.readline().decode("utf-8"))
    if header.get("format") != "lexloop-features":
        raise FeatureError("not a feature matrix file")
    if expected_schema_hash is not None and header["schema_hash"] != expected_schema_hash:
        raise FeatureError(
            "feature matrix schema mismatch "
            f"({header['schema_hash'][:12]}... vs {expected_schema_hash[:12]}...)"
        )
    count, slots = header["count"], header["slots"]
    data = np.frombuffer(stream.read(8 * count * slots), dtype="<f8").reshape(count, slots).copy()
    return FeatureMatrix(
        schema_hash=header["schema_hash"], comment_ids=list(header["ids"]), values=data
    )
