"""Distributional phrase embeddings: windowed co-occurrence counts, positive
PMI, and a rank-k factorization served through cosine-similarity queries.

The factorization is a seeded randomized range-finder with power iterations;
at full rank it reproduces the exact decomposition, and a fixed seed gives
bit-stable neighbor rankings.
"""

from __future__ import annotations

import difflib
import hashlib
import json
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Optional, Sequence, Union

import numpy as np
from scipy import sparse

from .textprep import PhraseSequence, PhraseVocab

EMBED_FORMAT_VERSION = 1


class EmbedError(Exception):
    pass


class UnknownPhraseError(KeyError):
    """Unknown query phrase; carries lexically close vocabulary entries."""

    def __init__(self, phrase: str, suggestions: list[str]):
        super().__init__(phrase)
        self.phrase = phrase
        self.suggestions = suggestions


def vocab_hash(vocab: PhraseVocab) -> str:
    digest = hashlib.sha256()
    for phrase in vocab.phrases:
        digest.update(phrase.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()


def build_stoplist(vocab: PhraseVocab, top_fraction: float = 0.001) -> set[int]:
    """Ids of the most frequent unigrams (top fraction, at least 0 entries);
    they stay in the token stream but are skipped as targets and contexts."""
    unigrams = [(p, vocab.counts.get(p, 0)) for p in vocab.phrases if "_" not in p]
    unigrams.sort(key=lambda item: (-item[1], item[0]))
    keep = int(len(unigrams) * top_fraction)
    return {vocab.index[p] for p, _ in unigrams[:keep]}


@dataclass
class CoocMatrix:
    counts: sparse.csr_matrix  # symmetric, zero diagonal
    window: int
    vocab_hash: str

    @property
    def n_phrases(self) -> int:
        return self.counts.shape[0]


@dataclass
class PmiMatrix:
    values: sparse.csr_matrix  # positive PMI, bits
    marginals: np.ndarray
    total: float
    vocab_hash: str


@dataclass
class EmbeddingTable:
    rows: np.ndarray           # (n_phrases, k)
    singular_values: np.ndarray
    vocab_hash: str
    seed: int
    weighting: float

    @property
    def rank(self) -> int:
        return self.rows.shape[1]


def count_cooc(
    sequences: Iterable[PhraseSequence],
    vocab: PhraseVocab,
    window: int = 5,
    stop_ids: Optional[set[int]] = None,
) -> CoocMatrix:
    """Count symmetric co-occurrences for position pairs at most window-1
    apart within one comment. Stop-listed phrases keep their positions but
    never count as target or context; the diagonal stays zero."""
    if window < 2:
        raise EmbedError("window must be at least 2")
    stop_ids = stop_ids or set()
    n = len(vocab)
    acc: dict[tuple[int, int], int] = {}
    for seq in sequences:
        ids = [vocab.index.get(tok, -1) for tok in seq.tokens]
        for i, ti in enumerate(ids):
            if ti < 0 or ti in stop_ids:
                continue
            for j in range(i + 1, min(i + window, len(ids))):
                tj = ids[j]
                if tj < 0 or tj in stop_ids or tj == ti:
                    continue
                key = (ti, tj) if ti < tj else (tj, ti)
                acc[key] = acc.get(key, 0) + 1
    if acc:
        keys = np.array(list(acc.keys()), dtype=np.int64)
        vals = np.array(list(acc.values()), dtype=np.float64)
        rows = np.concatenate([keys[:, 0], keys[:, 1]])
        cols = np.concatenate([keys[:, 1], keys[:, 0]])
        data = np.concatenate([vals, vals])
        counts = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
    else:
        counts = sparse.csr_matrix((n, n), dtype=np.float64)
    return CoocMatrix(counts=counts, window=window, vocab_hash=vocab_hash(vocab))


def pmi(cooc: CoocMatrix) -> PmiMatrix:
    """Positive pointwise mutual information in bits:
    max(0, log2(count(i,j) * N / (marg(i) * marg(j))))."""
    counts = cooc.counts.tocoo()
    marginals = np.asarray(cooc.counts.sum(axis=1)).ravel()
    total = float(marginals.sum())
    if total <= 0:
        raise EmbedError("co-occurrence matrix is empty")
    values = np.log2(counts.data * total / (marginals[counts.row] * marginals[counts.col]))
    np.clip(values, 0.0, None, out=values)
    out = sparse.csr_matrix((values, (counts.row, counts.col)), shape=counts.shape)
    out.eliminate_zeros()
    return PmiMatrix(values=out, marginals=marginals, total=total, vocab_hash=cooc.vocab_hash)


def _randomized_svd(
    matrix: sparse.spmatrix, k: int, seed: int, n_power_iter: int = 2, oversample: int = 10
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded range-finder: Gaussian projection, power iterations with QR
    re-orthonormalization, then an exact SVD of the small projected matrix."""
    n = matrix.shape[0]
    rng = np.random.default_rng(seed)
    width = min(n, k + oversample)
    omega = rng.standard_normal((matrix.shape[1], width))
    y = matrix @ omega
    q, _ = np.linalg.qr(y)
    for _ in range(n_power_iter):
        q, _ = np.linalg.qr(matrix.T @ q)
        q, _ = np.linalg.qr(matrix @ q)
    b = (matrix.T @ q).T
    u_small, sigma, _ = np.linalg.svd(np.asarray(b), full_matrices=False)
    u = q @ u_small
    # Deterministic sign: largest-magnitude component of each column positive.
    anchors = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[anchors, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u *= signs
    return u[:, :k], sigma[:k]


def factorize(
    pmi_matrix: PmiMatrix, k: int = 200, seed: int = 0, weighting: float = 0.5
) -> EmbeddingTable:
    """Rank-k embedding rows U * sigma**weighting from the PPMI matrix."""
    n = pmi_matrix.values.shape[0]
    if k < 1:
        raise EmbedError("rank must be at least 1")
    if k > n:
        raise EmbedError(f"rank {k} exceeds matrix dimension {n}")
    u, sigma = _randomized_svd(pmi_matrix.values, k=k, seed=seed)
    scale = np.power(sigma, weighting, where=sigma > 0, out=np.zeros_like(sigma))
    rows = u * scale
    if not np.all(np.isfinite(rows)):
        raise EmbedError("non-finite embedding rows")
    return EmbeddingTable(
        rows=rows,
        singular_values=sigma,
        vocab_hash=pmi_matrix.vocab_hash,
        seed=seed,
        weighting=weighting,
    )


def _cosine_to(rows: np.ndarray, vector: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    qnorm = np.linalg.norm(vector)
    if qnorm == 0:
        return np.zeros(rows.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = rows @ vector / (norms * qnorm)
    sims[~np.isfinite(sims)] = 0.0
    return sims


def neighbors(
    table: EmbeddingTable,
    vocab: PhraseVocab,
    query: Union[str, np.ndarray, Sequence[float]],
    n: int = 10,
    exclude_ids: Optional[set[int]] = None,
) -> list[tuple[str, float]]:
    """Top-n phrases by cosine similarity, self excluded, ties broken by
    ascending phrase id. Unknown phrases raise UnknownPhraseError carrying
    fuzzy lexical matches for the UI."""
    exclude = set(exclude_ids or ())
    if isinstance(query, str):
        qid = vocab.phrase_id(query)
        if qid is None:
            close = difflib.get_close_matches(query, vocab.phrases, n=5, cutoff=0.6)
            raise UnknownPhraseError(query, close)
        vector = table.rows[qid]
        exclude.add(qid)
    else:
        vector = np.asarray(query, dtype=np.float64)
        if vector.shape != (table.rank,):
            raise EmbedError(f"query vector must have dimension {table.rank}")
    sims = _cosine_to(table.rows, vector)
    order = np.lexsort((np.arange(len(sims)), -sims))
    out: list[tuple[str, float]] = []
    for idx in order:
        if idx in exclude:
            continue
        out.append((vocab.phrases[idx], float(sims[idx])))
        if len(out) == n:
            break
    return out


def save_embeddings(table: EmbeddingTable, stream: BinaryIO) -> None:
    header = {
        "format": "lexloop-embeddings",
        "version": EMBED_FORMAT_VERSION,
        "vocab_hash": table.vocab_hash,
        "k": table.rank,
        "rows": table.rows.shape[0],
        "seed": table.seed,
        "weighting": table.weighting,
    }
    stream.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
    stream.write(np.ascontiguousarray(table.singular_values, dtype="<f8").tobytes())
    stream.write(np.ascontiguousarray(table.rows, dtype="<f8").tobytes())


def load_embeddings(stream: BinaryIO, expected_vocab_hash: str) -> EmbeddingTable:
    header = json.loads(stream.readline().decode("utf-8"))
    if header.get("format") != "lexloop-embeddings":
        raise EmbedError("not an embedding snapshot")
    if header["vocab_hash"] != expected_vocab_hash:
        raise EmbedError(
            "embedding snapshot was built against a different vocabulary "
            f"(snapshot {header['vocab_hash'][:12]}..., expected {expected_vocab_hash[:12]}...)"
        )
    k, n_rows = header["k"], header["rows"]
    sigma = np.frombuffer(stream.read(8 * k), dtype="<f8").copy()
    rows = np.frombuffer(stream.read(8 * k * n_rows), dtype="<f8").reshape(n_rows, k).copy()
    return EmbeddingTable(
        rows=rows,
        singular_values=sigma,
        vocab_hash=header["vocab_hash"],
        seed=header["seed"],
        weighting=header["weighting"],
    )
