"""Unlabeled-pool construction and one-sided undersampling.

Pools feed the annotation loop: a uniform random pool for coverage and a
cluster-extremes pool that oversamples atypical comments. One-sided selection
keeps every minority-class example, builds a 1-NN-consistent majority subset,
and drops majority points caught in Tomek links.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from .features import FeatureMatrix

LABELS = ("belief", "dissonance", "neutral")


class SamplingError(Exception):
    pass


@dataclass
class Pool:
    name: str  # "random" | "biased"
    comment_ids: list[str]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.comment_ids)


@dataclass(frozen=True)
class LabeledEntry:
    comment_id: str
    label: str
    annotator: str
    timestamp: int
    pool: str

    def to_record(self) -> dict:
        return {
            "comment_id": self.comment_id,
            "label": self.label,
            "annotator": self.annotator,
            "timestamp": self.timestamp,
            "pool": self.pool,
        }


@dataclass
class LabeledSet:
    entries: list[LabeledEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, entry: LabeledEntry) -> None:
        if entry.label not in LABELS:
            raise SamplingError(f"label {entry.label!r} outside {LABELS}")
        if any(
            e.comment_id == entry.comment_id and e.annotator == entry.annotator
            for e in self.entries
        ):
            raise SamplingError(
                f"comment {entry.comment_id} already labeled by {entry.annotator}"
            )
        self.entries.append(entry)

    def labels_by_id(self) -> dict[str, str]:
        return {e.comment_id: e.label for e in self.entries}

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e.label] = counts.get(e.label, 0) + 1
        return counts


def random_pool(comment_ids: Sequence[str], n: int, seed: int) -> Pool:
    """Uniform sample without replacement, reproducible under the seed."""
    universe = sorted(comment_ids)
    if n > len(universe):
        raise SamplingError(f"requested {n} of {len(universe)} comments")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(universe), size=n, replace=False)
    ids = sorted(universe[i] for i in chosen)
    return Pool(name="random", comment_ids=ids, metadata={"seed": seed, "n": n})


def standardize(values: np.ndarray) -> np.ndarray:
    """Column z-scores; constant columns map to zero."""
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (values - mean) / std


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    dist_sq = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = dist_sq.sum()
        if total <= 0:
            centroids[i] = points[int(rng.integers(n))]
            continue
        probs = dist_sq / total
        choice = int(rng.choice(n, p=probs))
        centroids[i] = points[choice]
        dist_sq = np.minimum(dist_sq, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def _lloyd(
    points: np.ndarray,
    centroids: np.ndarray,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Standard Lloyd iterations; stops when every centroid moves < tol."""
    k = centroids.shape[0]
    assign = np.zeros(points.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        dists = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
        assign = np.argmin(dists, axis=1)
        new_centroids = centroids.copy()
        for c in range(k):
            members = points[assign == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
        shift = np.linalg.norm(new_centroids - centroids, axis=1).max()
        centroids = new_centroids
        if shift < tol:
            break
    dists = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
    assign = np.argmin(dists, axis=1)
    inertia = float(np.sum(np.min(dists, axis=1) ** 2))
    return centroids, assign, inertia


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 300,
    tol: float = 1e-6,
    n_init: int = 5,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Seeded k-means++ initializations followed by Lloyd iterations; the
    lowest-inertia restart wins (sub-seeds derive from the seed, so the whole
    procedure stays deterministic)."""
    distinct = np.unique(points, axis=0).shape[0]
    if k > distinct:
        raise SamplingError(f"k={k} exceeds {distinct} distinct points")
    best: Optional[tuple[np.ndarray, np.ndarray, float]] = None
    for restart in range(n_init):
        rng = np.random.default_rng([seed, restart])
        centroids = _kmeans_pp_init(points, k, rng)
        result = _lloyd(points, centroids, max_iter=max_iter, tol=tol)
        if best is None or result[2] < best[2]:
            best = result
    assert best is not None
    return best


def inertia_sweep(points: np.ndarray, ks: Sequence[int], seed: int) -> list[tuple[int, float]]:
    """Elbow diagnostic. Each k warm-starts from the previous solution plus
    the point farthest from its centroid, which keeps inertia non-increasing
    in k (a fresh random restart can lose that guarantee)."""
    out: list[tuple[int, float]] = []
    centroids: Optional[np.ndarray] = None
    for k in sorted(ks):
        if k > np.unique(points, axis=0).shape[0]:
            break
        if centroids is None or k <= centroids.shape[0]:
            centroids, _, inertia = kmeans(points, k, seed)
        else:
            while centroids.shape[0] < k:
                dists = np.linalg.norm(
                    points[:, None, :] - centroids[None, :, :], axis=2
                ).min(axis=1)
                centroids = np.vstack([centroids, points[int(np.argmax(dists))]])
            centroids, _, inertia = _lloyd(points, centroids)
        out.append((k, inertia))
    return out


def biased_pool(
    matrix: FeatureMatrix,
    k: int = 3,
    n_per_extreme: int = 20000,
    seed: int = 0,
    sweep_ks: Sequence[int] = (1, 2, 3, 4, 5, 6, 7, 8),
) -> Pool:
    """Cluster the standardized feature space and keep each cluster's nearest
    and farthest members from its own centroid, deduplicated."""
    points = standardize(matrix.values)
    centroids, assign, inertia = kmeans(points, k, seed)
    chosen: set[str] = set()
    for c in range(k):
        member_idx = np.flatnonzero(assign == c)
        if member_idx.size == 0:
            continue
        dists = np.linalg.norm(points[member_idx] - centroids[c], axis=1)
        order = np.lexsort((member_idx, dists))
        nearest = member_idx[order[:n_per_extreme]]
        farthest = member_idx[order[::-1][:n_per_extreme]]
        for idx in np.concatenate([nearest, farthest]):
            chosen.add(matrix.comment_ids[int(idx)])
    sweep = inertia_sweep(points, sweep_ks, seed)
    return Pool(
        name="biased",
        comment_ids=sorted(chosen),
        metadata={
            "seed": seed,
            "k": k,
            "n_per_extreme": n_per_extreme,
            "inertia": inertia,
            "inertia_sweep": sweep,
        },
    )


def exclude_labeled(pool: Pool, labeled_ids: Iterable[str]) -> Pool:
    """Regenerated pools must not re-offer already-labeled comments."""
    labeled = set(labeled_ids)
    return Pool(
        name=pool.name,
        comment_ids=[cid for cid in pool.comment_ids if cid not in labeled],
        metadata={**pool.metadata, "excluded_labeled": len(labeled)},
    )


def _nn_label(point: np.ndarray, subset: np.ndarray, labels: list[str]) -> str:
    dists = np.linalg.norm(subset - point, axis=1)
    return labels[int(np.argmin(dists))]


def one_sided_select(
    labeled: LabeledSet, matrix: FeatureMatrix, seed: int = 0
) -> LabeledSet:
    """One-sided selection over the labeled set in standardized feature space.

    Every class tied for the minimum count is minority and fully preserved.
    The consistent subset starts with all minority points plus one seeded
    random point per majority class; majority points misclassified by 1-NN
    against the growing subset are added; majority members of Tomek links are
    then removed.
    """
    counts = labeled.class_counts()
    if len(counts) < 2:
        raise SamplingError("one-sided selection needs at least two classes")
    id_to_row = {cid: i for i, cid in enumerate(matrix.comment_ids)}
    entries = sorted(labeled.entries, key=lambda e: e.comment_id)
    missing = [e.comment_id for e in entries if e.comment_id not in id_to_row]
    if missing:
        raise SamplingError(f"labeled comments missing from features: {missing[:5]}")

    points = standardize(matrix.values)
    coords = np.stack([points[id_to_row[e.comment_id]] for e in entries])
    labels = [e.label for e in entries]

    min_count = min(counts.values())
    minority_classes = {c for c, n in counts.items() if n == min_count}
    majority_classes = sorted(set(labels) - minority_classes)

    rng = np.random.default_rng(seed)
    keep = [i for i, lab in enumerate(labels) if lab in minority_classes]
    for cls in majority_classes:
        members = [i for i, lab in enumerate(labels) if lab == cls]
        keep.append(int(rng.choice(members)))
    keep_set = set(keep)

    # CNN pass: grow the subset with majority points it misclassifies.
    for i, lab in enumerate(labels):
        if i in keep_set or lab in minority_classes:
            continue
        subset = np.stack([coords[j] for j in keep])
        predicted = _nn_label(coords[i], subset, [labels[j] for j in keep])
        if predicted != lab:
            keep.append(i)
            keep_set.add(i)

    # Tomek links: mutual nearest neighbors with different labels; drop the
    # majority member, never a minority point.
    kept = sorted(keep_set)
    kept_coords = np.stack([coords[i] for i in kept])
    dists = np.linalg.norm(kept_coords[:, None, :] - kept_coords[None, :, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    nearest = np.argmin(dists, axis=1)
    to_remove: set[int] = set()
    for a in range(len(kept)):
        b = int(nearest[a])
        if int(nearest[b]) != a or b < a:
            continue
        lab_a, lab_b = labels[kept[a]], labels[kept[b]]
        if lab_a == lab_b:
            continue
        for local, lab in ((a, lab_a), (b, lab_b)):
            if lab not in minority_classes:
                to_remove.add(kept[local])

    final = [i for i in kept if i not in to_remove]
    return LabeledSet(entries=[entries[i] for i in final])


def save_pool(pool: Pool, stream: TextIO) -> None:
    header = {"format": "lexloop-pool", "name": pool.name, "metadata": pool.metadata}
    stream.write(json.dumps(header, sort_keys=True) + "\n")
    for cid in pool.comment_ids:
        stream.write(cid + "\n")


def load_pool(stream: TextIO) -> Pool:
    header = json.loads(stream.readline())
    if header.get("format") != "lexloop-pool":
        raise SamplingError("not a pool file")
    ids = [line.strip() for line in stream if line.strip()]
    return Pool(name=header["name"], comment_ids=ids, metadata=header.get("metadata", {}))


def save_labeled(labeled: LabeledSet, stream: TextIO) -> None:
    header = {"format": "lexloop-labels", "count": len(labeled)}
    stream.write(json.dumps(header, sort_keys=True) + "\n")
    for entry in labeled.entries:
        stream.write(json.dumps(entry.to_record(), sort_keys=True) + "\n")


def load_labeled(stream: TextIO) -> LabeledSet:
    header = json.loads(stream.readline())
    if header.get("format") != "lexloop-labels":
        raise SamplingError("not a labeled-set file")
    out = LabeledSet()
    for line in stream:
        line = line.strip()
        if not line:
            continue
        out.add(LabeledEntry(**json.loads(line)))
    return out
