import io

import numpy as np
import pytest

from lexloop.features import CategoryLexicon, build_schema
from lexloop.importance import (
    ImportanceError,
    build_slot_tags,
    default_lambda_path,
    fit_importance,
    fit_single_lambda,
    lambda_max,
    save_report,
    top_features,
    _one_hot,
    _standardize_design,
)
from lexloop.lexicon import Lexicon, SEED
from lexloop.sampling import LABELS


def planted_design(seed=0, n=150, p=25, planted=4, cls=0, shift=4.0):
    """Feature `planted` is active only in documents of class `cls`."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    labels = [LABELS[i % 3] for i in range(n)]
    mask = np.array([lab == LABELS[cls] for lab in labels])
    X[mask, planted] += shift
    return X, labels


class TestFit:
    def test_lambda_max_gives_all_zero(self):
        X, labels = planted_design()
        Xs, _, _ = _standardize_design(X)
        Y = _one_hot(labels)
        lam_top = lambda_max(Xs, Y - Y.mean(axis=0), l1_ratio=0.5)
        report = fit_single_lambda(X, labels, lam=lam_top, l1_ratio=0.5)
        assert not report.coefficients.any()
        # just below the bound, something becomes active
        report2 = fit_single_lambda(X, labels, lam=lam_top * 0.95, l1_ratio=0.5)
        assert report2.coefficients.any()

    def test_planted_feature_dominates_its_class(self):
        hits = 0
        for seed in range(20):
            X, labels = planted_design(seed=seed)
            report = fit_importance(X, labels, seed=seed, n_lambda=25, decades=3.0)
            row = report.coefficients[0]  # class "belief" = LABELS[0]
            if int(np.argmax(np.abs(row))) == 4 and row[4] > 0:
                hits += 1
        assert hits >= 18

    def test_objective_monotone_per_sweep(self):
        X, labels = planted_design(seed=3)
        report = fit_single_lambda(X, labels, lam=0.01, l1_ratio=0.5)
        diffs = np.diff(report.objective_trace)
        assert np.all(diffs <= 1e-12)

    def test_ols_limit(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((90, 12))
        labels = [LABELS[i % 3] for i in range(90)]
        report = fit_single_lambda(X, labels, lam=1e-12, l1_ratio=0.5)
        Xs, _, _ = _standardize_design(X)
        Y = _one_hot(labels)
        B = np.linalg.lstsq(Xs, Y - Y.mean(axis=0), rcond=None)[0]
        assert np.max(np.abs(report.coefficients - B.T)) < 1e-4

    def test_group_sparsity_at_pure_l1(self):
        X, labels = planted_design(seed=5)
        report = fit_importance(X, labels, l1_ratio=1.0, seed=0)
        B = report.coefficients.T  # (p, 3)
        for j in range(B.shape[0]):
            row = B[j]
            assert np.all(row == 0) or np.all(row != 0)

    def test_single_class_degenerate_errors(self):
        X = np.random.default_rng(0).standard_normal((20, 4))
        with pytest.raises(ImportanceError):
            fit_importance(X, ["belief"] * 20)

    def test_non_finite_features_error(self):
        X = np.full((10, 3), np.nan)
        with pytest.raises(ImportanceError):
            fit_importance(X, [LABELS[i % 3] for i in range(10)])

    def test_chosen_lambda_on_path(self):
        X, labels = planted_design(seed=7, n=90, p=10)
        path = default_lambda_path(1.0, n_values=12)
        report = fit_importance(X, labels, lam_path=path, seed=0)
        assert any(np.isclose(report.lam, path))


class TestTopFeatures:
    def fitted_report(self):
        X, labels = planted_design(seed=2)
        names = [f"slot{i}" for i in range(X.shape[1])]
        return fit_importance(X, labels, slot_names=names, seed=0)

    def test_all_zero_fit_empty_list(self):
        X, labels = planted_design()
        Xs, _, _ = _standardize_design(X)
        Y = _one_hot(labels)
        lam_top = lambda_max(Xs, Y - Y.mean(axis=0), 0.5)
        report = fit_single_lambda(X, labels, lam=lam_top)
        assert top_features(report, "belief", n=5) == []

    def test_planted_is_rank_one(self):
        report = self.fitted_report()
        top = top_features(report, "belief", n=3)
        assert top[0][0] == "slot4"

    def test_unknown_class_errors(self):
        report = self.fitted_report()
        with pytest.raises(ImportanceError):
            top_features(report, "other", n=3)

    def test_canon_dimension_tags(self):
        lex = Lexicon()
        lex.add("potus", ["heroes"], SEED)
        lex.add("wwg1wga", ["movement"], SEED)
        lex.add("white_hats", ["movement", "heroes"], SEED)
        cats = [CategoryLexicon(f"c{i}", (f"w{i}",)) for i in range(19)]
        schema = build_schema(lex, cats)
        tags = build_slot_tags(schema, lex)
        assert tags["canon:potus"] == "HERO"
        assert tags["canon:wwg1wga"] == "MMT"
        assert tags["canon:white_hats"] == "HERO/MMT"
        assert tags["category:c0"] == "category"
        assert tags["ic"] == "ic"


def test_report_export_contains_ranked_rows():
    X, labels = planted_design(seed=2)
    names = [f"slot{i}" for i in range(X.shape[1])]
    report = fit_importance(X, labels, slot_names=names, seed=0)
    buf = io.StringIO()
    save_report(report, buf, tags={n: "" for n in names}, n=5)
    text = buf.getvalue()
    assert "[belief]" in text and "[dissonance]" in text and "[neutral]" in text
    assert "slot4" in text
