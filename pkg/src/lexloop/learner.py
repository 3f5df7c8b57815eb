"""Active-learning loop, final tree-ensemble training, and prediction pooling.

The annotation session ranks unlabeled comments by predictive entropy under a
fast interim model (multinomial logistic), tracks cross-validated and held-out
metrics on a fixed cadence, and flags the stop criterion once precision and
recall clear the threshold for every class. Final models are a random-forest
and a gradient-boosted-trees learner behind one probabilistic interface, with
their predictions pooled by consensus (or the max / average / stacking
variants).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.ensemble import GradientBoostingClassifier, RandomForestClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold

from .features import FeatureMatrix
from .sampling import LABELS, LabeledEntry, LabeledSet, Pool, standardize

STRATEGIES = ("consensus", "max", "average", "stacking")


class LearnerError(Exception):
    pass


@dataclass(frozen=True)
class ClassDistribution:
    p_belief: float
    p_dissonance: float
    p_neutral: float

    def __post_init__(self) -> None:
        probs = self.as_array()
        if np.any(probs < -1e-12) or np.any(probs > 1 + 1e-12):
            raise LearnerError(f"probabilities out of range: {probs}")
        if abs(float(probs.sum()) - 1.0) > 1e-9:
            raise LearnerError(f"probabilities sum to {probs.sum()}, not 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_belief, self.p_dissonance, self.p_neutral])

    def argmax_label(self) -> str:
        return LABELS[int(np.argmax(self.as_array()))]


def entropy(dist: ClassDistribution) -> float:
    """Shannon entropy in bits; 0 * log 0 reads as 0."""
    total = 0.0
    for p in dist.as_array():
        if p > 0:
            total -= p * math.log2(p)
    return total


def _dist_from_row(row: np.ndarray) -> ClassDistribution:
    return ClassDistribution(float(row[0]), float(row[1]), float(row[2]))


def _full_proba(model, x: np.ndarray) -> np.ndarray:
    """predict_proba aligned to the fixed LABELS order, absent classes at 0."""
    raw = model.predict_proba(x)
    out = np.zeros((raw.shape[0], len(LABELS)))
    for col, cls in enumerate(model.classes_):
        out[:, LABELS.index(cls)] = raw[:, col]
    return out


@dataclass
class Metrics:
    precision: dict[str, Optional[float]]
    recall: dict[str, Optional[float]]
    balanced_accuracy: Optional[float]
    adjusted_balanced_accuracy: Optional[float]

    def meets_threshold(self, tau: float) -> bool:
        for label in LABELS:
            p, r = self.precision.get(label), self.recall.get(label)
            if p is None or r is None or p < tau or r < tau:
                return False
        return True

    def to_record(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "balanced_accuracy": self.balanced_accuracy,
            "adjusted_balanced_accuracy": self.adjusted_balanced_accuracy,
        }


def metrics_from_confusion(y_true: Sequence[str], y_pred: Sequence[str]) -> Metrics:
    precision: dict[str, Optional[float]] = {}
    recall: dict[str, Optional[float]] = {}
    recalls = []
    for label in LABELS:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == label and p == label)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != label and p == label)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == label and p != label)
        precision[label] = tp / (tp + fp) if (tp + fp) else None
        recall[label] = tp / (tp + fn) if (tp + fn) else None
        if tp + fn:
            recalls.append(tp / (tp + fn))
    ba = float(np.mean(recalls)) if len(recalls) == len(LABELS) else None
    adjusted = adjusted_balanced_accuracy(ba) if ba is not None else None
    return Metrics(
        precision=precision, recall=recall, balanced_accuracy=ba,
        adjusted_balanced_accuracy=adjusted,
    )


def adjusted_balanced_accuracy(ba: float) -> float:
    """Chance-adjusted: 0 at random (1/3), 1 at perfect."""
    return (ba - 1.0 / 3.0) / (2.0 / 3.0)


def _interim_model(seed: int) -> LogisticRegression:
    return LogisticRegression(max_iter=500, random_state=seed)


class ActiveSession:
    """Single-writer annotation session over one pool.

    A fixed fraction of the pool is assigned to a held-out split at session
    start; labels landing there evaluate the model and never train it.
    Selection is deterministic given the session state, so peeking at the next
    comment is idempotent.
    """

    def __init__(
        self,
        pool: Pool,
        matrix: FeatureMatrix,
        seed: int = 0,
        eval_interval: int = 50,
        tau: float = 0.6,
        strategy: str = "entropy",
        holdout_fraction: float = 0.2,
    ):
        if strategy not in ("entropy", "random"):
            raise LearnerError(f"unknown selection strategy {strategy!r}")
        self.pool = pool
        self.seed = seed
        self.eval_interval = eval_interval
        self.tau = tau
        self.strategy = strategy
        row_by_id = {cid: i for i, cid in enumerate(matrix.comment_ids)}
        missing = [cid for cid in pool.comment_ids if cid not in row_by_id]
        if missing:
            raise LearnerError(f"pool comments missing from features: {missing[:5]}")
        self.ids = sorted(pool.comment_ids)
        self._idx = {cid: i for i, cid in enumerate(self.ids)}
        self._X = standardize(matrix.values)[[row_by_id[cid] for cid in self.ids]]
        rng = np.random.default_rng(seed)
        n_holdout = int(round(holdout_fraction * len(self.ids)))
        holdout_idx = rng.choice(len(self.ids), size=n_holdout, replace=False)
        self.holdout_ids = {self.ids[i] for i in holdout_idx}
        self.labels: dict[str, str] = {}
        self.skipped: set[str] = set()
        self.metric_history: list[dict] = []
        self.stopped_at: Optional[int] = None
        self._model: Optional[LogisticRegression] = None

    # -- selection ---------------------------------------------------------

    def _unlabeled(self) -> list[str]:
        return [
            cid for cid in self.ids if cid not in self.labels and cid not in self.skipped
        ]

    def _train_items(self) -> tuple[list[str], list[str]]:
        ids = [cid for cid in self.labels if cid not in self.holdout_ids]
        return ids, [self.labels[cid] for cid in ids]

    def next_to_label(self) -> Optional[str]:
        """Most uncertain unlabeled comment id, or None when exhausted."""
        pending = self._unlabeled()
        if not pending:
            return None
        train_ids, train_labels = self._train_items()
        cold = len(set(train_labels)) < 2
        if self.strategy == "random" or cold:
            rng = np.random.default_rng([self.seed, len(self.labels), len(self.skipped)])
            return pending[int(rng.integers(len(pending)))]
        model = self._ensure_model(train_ids, train_labels)
        idx = [self._idx[cid] for cid in pending]
        probs = _full_proba(model, self._X[idx])
        logp = np.log2(np.where(probs > 0, probs, 1.0))
        entropies = -(probs * logp).sum(axis=1)
        best = int(np.lexsort((np.arange(len(pending)), -entropies))[0])
        return pending[best]

    def _ensure_model(self, train_ids: list[str], train_labels: list[str]) -> LogisticRegression:
        if self._model is None:
            model = _interim_model(self.seed)
            rows = [self._idx[cid] for cid in train_ids]
            model.fit(self._X[rows], train_labels)
            self._model = model
        return self._model

    # -- labeling ----------------------------------------------------------

    def submit_label(self, comment_id: str, label: str) -> None:
        """Record a label, retrain the interim model, and refresh metrics on
        the evaluation cadence."""
        if label not in LABELS:
            raise LearnerError(f"label {label!r} outside {LABELS}")
        if comment_id not in self._idx:
            raise LearnerError(f"comment {comment_id} is not in this pool")
        if comment_id in self.labels:
            raise LearnerError(f"comment {comment_id} already labeled")
        self.labels[comment_id] = label
        self.skipped.discard(comment_id)
        self._model = None
        if len(self.labels) % self.eval_interval == 0:
            self._record_metrics()

    def skip(self, comment_id: str) -> None:
        if comment_id in self.labels:
            raise LearnerError(f"comment {comment_id} already labeled")
        self.skipped.add(comment_id)

    @property
    def complete(self) -> bool:
        return self.stopped_at is not None

    # -- evaluation --------------------------------------------------------

    def _cv_metrics(self, ids: list[str], labels: list[str]) -> Optional[Metrics]:
        counts: dict[str, int] = {}
        for lab in labels:
            counts[lab] = counts.get(lab, 0) + 1
        if len(counts) < 2 or min(counts.values()) < 2:
            return None
        n_splits = min(5, min(counts.values()))
        rows = [self._idx[cid] for cid in ids]
        X, y = self._X[rows], np.array(labels)
        skf = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=self.seed)
        y_pred = np.empty(len(y), dtype=object)
        for train_idx, test_idx in skf.split(X, y):
            model = _interim_model(self.seed)
            model.fit(X[train_idx], y[train_idx])
            y_pred[test_idx] = model.predict(X[test_idx])
        return metrics_from_confusion(list(y), list(y_pred))

    def _holdout_metrics(self, train_ids: list[str], train_labels: list[str]) -> Optional[Metrics]:
        held = [(cid, lab) for cid, lab in self.labels.items() if cid in self.holdout_ids]
        if not held or len(set(train_labels)) < 2:
            return None
        model = self._ensure_model(train_ids, train_labels)
        rows = [self._idx[cid] for cid, _ in held]
        preds = model.predict(self._X[rows])
        return metrics_from_confusion([lab for _, lab in held], list(preds))

    def _record_metrics(self) -> None:
        train_ids, train_labels = self._train_items()
        cv = self._cv_metrics(train_ids, train_labels) if train_ids else None
        holdout = self._holdout_metrics(train_ids, train_labels) if train_ids else None
        entry = {
            "n_labels": len(self.labels),
            "cv": cv.to_record() if cv else None,
            "holdout": holdout.to_record() if holdout else None,
        }
        self.metric_history.append(entry)
        if self.stopped_at is None and cv is not None and cv.meets_threshold(self.tau):
            self.stopped_at = len(self.labels)

    def to_labeled_set(self, annotator: str = "session") -> LabeledSet:
        out = LabeledSet()
        for stamp, (cid, label) in enumerate(sorted(self.labels.items())):
            out.add(
                LabeledEntry(
                    comment_id=cid, label=label, annotator=annotator,
                    timestamp=stamp, pool=self.pool.name,
                )
            )
        return out


# -- final models ------------------------------------------------------------


@dataclass
class TreeModel:
    """Uniform 3-class probabilistic interface over the tree learners."""

    family: str  # "random_forest" | "gradient_boosting"
    params: dict
    seed: int
    _model: object = field(default=None, repr=False)

    def _make(self):
        if self.family == "random_forest":
            return RandomForestClassifier(random_state=self.seed, **self.params)
        if self.family == "gradient_boosting":
            return GradientBoostingClassifier(random_state=self.seed, **self.params)
        raise LearnerError(f"unknown model family {self.family!r}")

    def fit(self, X: np.ndarray, y: Sequence[str]) -> "TreeModel":
        present = set(y)
        missing = [lab for lab in LABELS if lab not in present]
        if missing:
            raise LearnerError(f"training set lacks classes: {missing}")
        model = self._make()
        model.fit(X, list(y))
        self._model = model
        return self

    def predict_dist(self, X: np.ndarray) -> list[ClassDistribution]:
        if self._model is None:
            raise LearnerError("model not fitted")
        probs = _full_proba(self._model, X)
        return [_dist_from_row(row) for row in probs]


DEFAULT_RF_GRID = {
    "n_estimators": [50, 100, 200],
    "max_depth": [None, 5, 10],
    "min_samples_leaf": [1, 2, 4],
}
DEFAULT_GB_GRID = {
    "n_estimators": [50, 100, 200],
    "learning_rate": [0.03, 0.1, 0.3],
    "max_depth": [2, 3, 4],
}


def grid_search(
    family: str,
    grid: dict[str, list],
    X: np.ndarray,
    y: Sequence[str],
    seed: int,
    n_splits: int = 5,
) -> tuple[dict, list[dict]]:
    """Exhaustive search under stratified CV, maximizing chance-adjusted
    balanced accuracy; returns the winner plus the full audit trace."""
    y = np.array(y)
    counts = {lab: int((y == lab).sum()) for lab in set(y)}
    if min(counts.values()) < 2:
        raise LearnerError("grid search needs at least two examples per class")
    splits = max(2, min(n_splits, min(counts.values())))
    keys = sorted(grid)
    trace: list[dict] = []
    best_params, best_score = None, -np.inf
    for combo in product(*(grid[k] for k in keys)):
        params = dict(zip(keys, combo))
        skf = StratifiedKFold(n_splits=splits, shuffle=True, random_state=seed)
        scores = []
        for train_idx, test_idx in skf.split(X, y):
            model = TreeModel(family=family, params=params, seed=seed)
            model.fit(X[train_idx], y[train_idx])
            preds = [d.argmax_label() for d in model.predict_dist(X[test_idx])]
            fold = metrics_from_confusion(list(y[test_idx]), preds)
            if fold.adjusted_balanced_accuracy is not None:
                scores.append(fold.adjusted_balanced_accuracy)
        score = float(np.mean(scores)) if scores else -np.inf
        trace.append({"params": params, "score": score})
        if score > best_score:
            best_params, best_score = params, score
    if best_params is None:
        raise LearnerError("grid search found no scorable configuration")
    return best_params, trace


@dataclass
class TrainedPair:
    model_random: TreeModel
    model_biased: TreeModel
    trace_random: list[dict]
    trace_biased: list[dict]


def train_final(
    labeled_random: LabeledSet,
    labeled_biased: LabeledSet,
    matrix: FeatureMatrix,
    seed: int = 0,
    rf_grid: Optional[dict] = None,
    gb_grid: Optional[dict] = None,
) -> TrainedPair:
    """Fit the random-pool random forest and the biased-pool gradient-boosted
    trees, each grid-searched under stratified CV."""
    row_by_id = {cid: i for i, cid in enumerate(matrix.comment_ids)}

    def xy(labeled: LabeledSet) -> tuple[np.ndarray, list[str]]:
        entries = sorted(labeled.entries, key=lambda e: e.comment_id)
        X = matrix.values[[row_by_id[e.comment_id] for e in entries]]
        return X, [e.label for e in entries]

    Xr, yr = xy(labeled_random)
    Xb, yb = xy(labeled_biased)
    for y in (yr, yb):
        missing = [lab for lab in LABELS if lab not in set(y)]
        if missing:
            raise LearnerError(f"training set lacks classes: {missing}")
    rf_params, rf_trace = grid_search("random_forest", rf_grid or DEFAULT_RF_GRID, Xr, yr, seed)
    gb_params, gb_trace = grid_search("gradient_boosting", gb_grid or DEFAULT_GB_GRID, Xb, yb, seed)
    model_a = TreeModel(family="random_forest", params=rf_params, seed=seed).fit(Xr, yr)
    model_b = TreeModel(family="gradient_boosting", params=gb_params, seed=seed).fit(Xb, yb)
    return TrainedPair(
        model_random=model_a, model_biased=model_b,
        trace_random=rf_trace, trace_biased=gb_trace,
    )


# -- pooling -----------------------------------------------------------------


@dataclass
class EnsemblePrediction:
    dist_a: ClassDistribution
    dist_b: ClassDistribution
    outcome: str  # label or "abstain"
    strategy: str


class StackingPooler:
    """Third model over [dist_a || dist_b || features]."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._model: Optional[LogisticRegression] = None

    @staticmethod
    def _design(dists_a, dists_b, features: np.ndarray) -> np.ndarray:
        a = np.stack([d.as_array() for d in dists_a])
        b = np.stack([d.as_array() for d in dists_b])
        return np.hstack([a, b, features])

    def fit(self, dists_a, dists_b, features: np.ndarray, y: Sequence[str]) -> "StackingPooler":
        model = LogisticRegression(max_iter=1000, random_state=self.seed)
        model.fit(self._design(dists_a, dists_b, features), list(y))
        self._model = model
        return self

    def predict(self, a: ClassDistribution, b: ClassDistribution, features: np.ndarray) -> str:
        if self._model is None:
            raise LearnerError("stacking pooler not fitted")
        x = self._design([a], [b], features.reshape(1, -1))
        return str(self._model.predict(x)[0])


def pool_predictions(
    a: ClassDistribution,
    b: ClassDistribution,
    strategy: str = "consensus",
    stacker: Optional[StackingPooler] = None,
    features: Optional[np.ndarray] = None,
) -> EnsemblePrediction:
    """Combine two model distributions into one outcome; consensus abstains
    exactly when the argmax labels disagree."""
    if strategy not in STRATEGIES:
        raise LearnerError(f"unknown pooling strategy {strategy!r}")
    if strategy == "consensus":
        outcome = a.argmax_label() if a.argmax_label() == b.argmax_label() else "abstain"
    elif strategy == "max":
        stacked = np.concatenate([a.as_array(), b.as_array()])
        outcome = LABELS[int(np.argmax(stacked)) % len(LABELS)]
    elif strategy == "average":
        outcome = _dist_from_row((a.as_array() + b.as_array()) / 2.0).argmax_label()
    else:
        if stacker is None or features is None:
            raise LearnerError("stacking needs a fitted pooler and the feature row")
        outcome = stacker.predict(a, b, features)
    return EnsemblePrediction(dist_a=a, dist_b=b, outcome=outcome, strategy=strategy)


@dataclass
class Evaluation:
    metrics: Optional[Metrics]
    abstention_rate: float
    n_scored: int

    def to_record(self) -> dict:
        return {
            "metrics": self.metrics.to_record() if self.metrics else None,
            "abstention_rate": self.abstention_rate,
            "n_scored": self.n_scored,
        }


def evaluate(
    model_a: TreeModel,
    model_b: TreeModel,
    X: np.ndarray,
    y_true: Sequence[str],
    strategy: str = "consensus",
    stacker: Optional[StackingPooler] = None,
) -> Evaluation:
    """Pooled metrics over the non-abstained items; the abstention rate is
    always reported so removed disagreements stay visible."""
    if len(y_true) == 0:
        raise LearnerError("empty evaluation set")
    dists_a = model_a.predict_dist(X)
    dists_b = model_b.predict_dist(X)
    outcomes = []
    for i, (da, db) in enumerate(zip(dists_a, dists_b)):
        feats = X[i] if strategy == "stacking" else None
        outcomes.append(pool_predictions(da, db, strategy, stacker, feats).outcome)
    kept = [(t, p) for t, p in zip(y_true, outcomes) if p != "abstain"]
    abstention = 1.0 - len(kept) / len(y_true)
    if not kept:
        return Evaluation(metrics=None, abstention_rate=1.0, n_scored=0)
    metrics = metrics_from_confusion([t for t, _ in kept], [p for _, p in kept])
    return Evaluation(metrics=metrics, abstention_rate=abstention, n_scored=len(kept))


def save_predictions(
    ids: Sequence[str],
    dists_a: Sequence[ClassDistribution],
    dists_b: Sequence[ClassDistribution],
    outcomes: Sequence[str],
    stream,
) -> None:
    for cid, da, db, outcome in zip(ids, dists_a, dists_b, outcomes):
        stream.write(
            json.dumps(
                {
                    "comment_id": cid,
                    "dist_a": list(da.as_array()),
                    "dist_b": list(db.as_array()),
                    "outcome": outcome,
                },
                sort_keys=True,
            )
            + "\n"
        )
