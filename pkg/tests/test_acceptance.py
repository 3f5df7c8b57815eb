"""Acceptance criteria, one test per criterion.

Each test prints a PASS line with its runtime and asserts the stated
tolerance and time budget. Everything runs on synthetic fixtures with
independent oracles; no external data."""

import dataclasses
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from lexloop.embed import count_cooc, factorize, neighbors, pmi
from lexloop.engagement import (
    dissonance_index,
    encode_its,
    fit_its,
    fit_negative_binomial,
)
from lexloop.features import (
    CategoryLexicon,
    ConnectiveIcScorer,
    DEFAULT_CUE_LISTS,
    ExtractionContext,
    SifModel,
    build_schema,
    canon_counts,
    category_counts,
    credibility_cues,
    extract_all,
    feedback,
    ic_score,
)
from lexloop.importance import (
    fit_importance,
    fit_single_lambda,
    lambda_max,
    _one_hot,
    _standardize_design,
)
from lexloop.learner import ActiveSession, ClassDistribution, entropy, pool_predictions
from lexloop.lexicon import EvidenceIndex, ExpansionSession, Lexicon, SEED
from lexloop.sampling import LABELS, Pool, one_sided_select
from lexloop.textprep import ResolvedText

from conftest import alias_corpus, make_comment, sequences_for, unigram_vocab
from test_embed import dense_ppmi_oracle, seqs_of, vocab_of
from test_engagement import nb2_sample, planted_observations, spread_timestamps
from test_sampling import blobs, labeled_from, matrix_from


def report(name: str, started: float, budget: float | None = None) -> None:
    elapsed = time.monotonic() - started
    suffix = f" (budget {budget:.0f}s)" if budget else ""
    print(f"ACCEPTANCE PASS {name}: {elapsed:.2f}s{suffix}")
    if budget is not None:
        assert elapsed < budget, f"{name} exceeded its {budget}s budget"


def test_eq1_entropy_exactness():
    started = time.monotonic()
    assert entropy(ClassDistribution(1 / 3, 1 / 3, 1 / 3)) == pytest.approx(
        math.log2(3), abs=1e-12
    )
    assert entropy(ClassDistribution(1.0, 0.0, 0.0)) == pytest.approx(0.0, abs=1e-12)
    assert entropy(ClassDistribution(0.5, 0.25, 0.25)) == pytest.approx(1.5, abs=1e-12)
    report("eq1-entropy-exactness", started, budget=1.0)


def test_ppmi_brute_force_oracle():
    started = time.monotonic()
    rng = np.random.default_rng(2024)
    for trial in range(10):
        words = [f"w{i}" for i in range(int(rng.integers(8, 20)))]
        n_comments = int(rng.integers(5, 51))
        lists = [
            list(rng.choice(words, size=int(rng.integers(2, 12))))
            for _ in range(n_comments)
        ]
        vocab = vocab_of(lists)
        cooc = count_cooc(seqs_of(lists), vocab, window=5)
        sparse_values = pmi(cooc).values.toarray()
        oracle = dense_ppmi_oracle(cooc.counts.toarray())
        assert np.allclose(sparse_values, oracle, atol=1e-9), f"trial {trial}"
    report("ppmi-brute-force-oracle", started, budget=10.0)


def test_embedding_alias_recovery():
    started = time.monotonic()
    successes = 0
    for seed in range(20):
        docs = alias_corpus(n_docs=2000, pairs=5, seed=seed)
        vocab = unigram_vocab(docs)
        seqs = sequences_for(docs, vocab)
        table = factorize(pmi(count_cooc(seqs, vocab, window=5)), k=50, seed=seed)
        ok = True
        for p in range(5):
            top = [phrase for phrase, _ in neighbors(table, vocab, f"seed{p}", n=10)]
            if f"alias{p}" not in top:
                ok = False
                break
        successes += ok
    assert successes >= 18, f"alias recovered in only {successes}/20 runs"
    report("embedding-alias-recovery", started, budget=60.0)


def test_lexicon_reranking_oracle():
    started = time.monotonic()
    docs = alias_corpus(n_docs=1200, pairs=4, seed=7)
    vocab = unigram_vocab(docs)
    assert len(vocab) <= 2000
    seqs = sequences_for(docs, vocab)
    table = factorize(pmi(count_cooc(seqs, vocab, window=5)), k=32, seed=0)
    lex = Lexicon()
    lex.add("seed0", ["foes"], SEED)
    lex.add("seed1", ["movement"], SEED)
    lex.add("alias2", ["foes"], SEED)
    session = ExpansionSession("acc", lex, table, vocab)
    session.reject("filler0")
    result = session.suggest(n=10)

    members = sorted(lex.phrases)
    rows = np.stack([table.rows[vocab.index[m]] for m in members])
    norms = np.linalg.norm(rows, axis=1)
    oracle = []
    for pid, phrase in enumerate(vocab.phrases):
        if phrase in lex.phrases or phrase in session.rejected:
            continue
        v = table.rows[pid]
        vnorm = np.linalg.norm(v)
        score = float(np.max(rows @ v / (norms * vnorm))) if vnorm else 0.0
        oracle.append((phrase, score, pid))
    oracle.sort(key=lambda t: (-t[1], t[2]))
    assert [s.phrase for s in result.items] == [p for p, _, _ in oracle[:10]]
    np.testing.assert_allclose(
        [s.score for s in result.items], [s for _, s, _ in oracle[:10]], atol=1e-12
    )
    report("lexicon-reranking-oracle", started, budget=5.0)


def test_its_encoding_anchor_and_recovery():
    started = time.monotonic()
    # paper-worked anchor: 2 pre-weeks, 2nd week after the event
    obs = encode_its("u", spread_timestamps(4, 4), intervention=0, window_weeks=5)
    anchor = next(o for o in obs if o.week == 5)
    assert (anchor.week, anchor.after, anchor.weeks_since) == (5, 1, 3)

    exact = fit_its(planted_observations(n_users=3, sigma=0.0))
    assert np.allclose(
        [r.coef for r in exact.rows], [0.5, -0.01, -0.02, -0.01], atol=1e-9
    )

    true = {"const": 0.5, "week": -0.01, "after": -0.02, "weeks_since": -0.01}
    covered = {name: 0 for name in true}
    for seed in range(100):
        fit = fit_its(planted_observations(n_users=200, sigma=0.01, seed=seed))
        for row in fit.rows:
            if row.ci_low <= true[row.name] <= row.ci_high:
                covered[row.name] += 1
    for name, count in covered.items():
        assert count >= 90, (name, count)
    report("its-encoding-and-recovery", started, budget=120.0)


def test_eq3_dissonance_index():
    started = time.monotonic()
    assert dissonance_index(3, 1) == 0.75
    assert dissonance_index(0, 5) == 0.0
    assert dissonance_index(0, 0) is None
    report("eq3-dissonance-index", started)


def test_one_sided_selection():
    started = time.monotonic()
    rng = np.random.default_rng(99)
    for trial in range(50):
        sizes = sorted(int(v) for v in rng.integers(5, 45, size=3))
        points, truth = blobs(
            seed=500 + trial, sizes=tuple(sizes), spread=float(rng.uniform(0.3, 3.0))
        )
        labels = [LABELS[t] for t in truth]
        matrix = matrix_from(points)
        labeled = labeled_from(labels, matrix.comment_ids)
        out = one_sided_select(labeled, matrix, seed=trial)
        counts = labeled.class_counts()
        minimum = min(counts.values())
        for cls, n in counts.items():
            if n == minimum:
                assert out.class_counts().get(cls, 0) == n, f"trial {trial}"

    rng = np.random.default_rng(7)
    minority = rng.normal(0, 0.5, size=(10, 2))
    majority = rng.normal(10, 0.5, size=(40, 2))
    intruder = minority[0] + np.array([0.01, 0.0])
    points = np.vstack([minority, majority, intruder])
    labels = ["dissonance"] * 10 + ["neutral"] * 41
    matrix = matrix_from(points)
    labeled = labeled_from(labels, matrix.comment_ids)
    out = one_sided_select(labeled, matrix, seed=0)
    assert matrix.comment_ids[-1] not in {e.comment_id for e in out.entries}
    report("one-sided-selection", started)


def _al_pool(seed: int, n: int = 600, minority_frac: float = 0.05):
    rng = np.random.default_rng(seed)
    n_minority = int(n * minority_frac)
    n_major = (n - n_minority) // 2
    sizes = {"belief": n_major, "dissonance": n_minority, "neutral": n - n_major - n_minority}
    centers = {"belief": (0.0, 0.0), "dissonance": (5.0, 8.0), "neutral": (10.0, 0.0)}
    points, labels = [], []
    for cls in LABELS:
        c = centers[cls]
        points.append(c + 0.6 * rng.standard_normal((sizes[cls], 2)))
        labels += [cls] * sizes[cls]
    order = rng.permutation(n)
    points = np.vstack(points)[order]
    labels = [labels[i] for i in order]
    matrix = matrix_from(points)
    return matrix, dict(zip(matrix.comment_ids, labels))


def _labels_to_stop(strategy: str, seed: int, cap: int = 400) -> int:
    matrix, oracle = _al_pool(seed)
    pool = Pool(name="random", comment_ids=list(matrix.comment_ids), metadata={})
    session = ActiveSession(
        pool, matrix, seed=seed, eval_interval=5, tau=0.6,
        strategy=strategy, holdout_fraction=0.0,
    )
    while session.stopped_at is None and len(session.labels) < cap:
        cid = session.next_to_label()
        if cid is None:
            break
        session.submit_label(cid, oracle[cid])
    return session.stopped_at if session.stopped_at is not None else cap


def test_active_learning_efficiency():
    started = time.monotonic()
    uncertainty, random_base = [], []
    for seed in range(20):
        uncertainty.append(_labels_to_stop("entropy", seed))
        random_base.append(_labels_to_stop("random", seed))
    med_u = float(np.median(uncertainty))
    med_r = float(np.median(random_base))
    assert med_u <= 0.75 * med_r, (med_u, med_r)
    report("active-learning-efficiency", started, budget=300.0)


def test_consensus_pooling_and_variants():
    started = time.monotonic()
    rng = np.random.default_rng(1234)
    for _ in range(10_000):
        a = ClassDistribution(*rng.dirichlet(np.ones(3)))
        b = ClassDistribution(*rng.dirichlet(np.ones(3)))
        outcome = pool_predictions(a, b, "consensus").outcome
        assert (outcome == "abstain") == (a.argmax_label() != b.argmax_label())
    fixed = [
        # (a, b, max outcome, average outcome)
        ((0.6, 0.3, 0.1), (0.2, 0.7, 0.1), "dissonance", "dissonance"),
        ((0.8, 0.1, 0.1), (0.1, 0.2, 0.7), "belief", "belief"),
        ((0.1, 0.2, 0.7), (0.3, 0.6, 0.1), "neutral", "dissonance"),
    ]
    for a_vals, b_vals, want_max, want_avg in fixed:
        a, b = ClassDistribution(*a_vals), ClassDistribution(*b_vals)
        assert pool_predictions(a, b, "max").outcome == want_max
        assert pool_predictions(a, b, "average").outcome == want_avg
    report("consensus-pooling", started)


def test_multitask_elastic_net():
    started = time.monotonic()
    rng = np.random.default_rng(0)
    X = rng.standard_normal((150, 25))
    labels = [LABELS[i % 3] for i in range(150)]
    mask = np.array([lab == "belief" for lab in labels])
    X[mask, 4] += 4.0
    Xs, _, _ = _standardize_design(X)
    Y = _one_hot(labels)
    lam_top = lambda_max(Xs, Y - Y.mean(axis=0), l1_ratio=0.5)
    at_bound = fit_single_lambda(X, labels, lam=lam_top, l1_ratio=0.5)
    assert not at_bound.coefficients.any()

    hits = 0
    for seed in range(20):
        Xr = np.random.default_rng(seed).standard_normal((150, 25))
        labs = [LABELS[i % 3] for i in range(150)]
        m = np.array([lab == "belief" for lab in labs])
        Xr[m, 4] += 4.0
        rep = fit_importance(Xr, labs, seed=seed, n_lambda=25, decades=3.0)
        row = rep.coefficients[0]
        if int(np.argmax(np.abs(row))) == 4:
            hits += 1
    assert hits >= 18, hits

    trace = fit_single_lambda(X, labels, lam=0.01, l1_ratio=0.5).objective_trace
    assert np.all(np.diff(trace) <= 1e-12)
    report("multitask-elastic-net", started)


def test_nb2_regression():
    started = time.monotonic()
    beta = np.array([3.6, -0.06, 0.04, -0.03])
    names = ["const", "x1", "x2", "x3"]
    covered = {n: 0 for n in names}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = np.column_stack([np.ones(2000), rng.standard_normal((2000, 3))])
        y = nb2_sample(rng, X, beta, alpha=0.3)
        rows, _ = fit_negative_binomial(X, y, names)
        for row, true in zip(rows[:4], beta):
            if abs(row.coef - true) <= 2 * row.se:
                covered[row.name] += 1
    for name, count in covered.items():
        assert count >= 90, (name, count)

    rng = np.random.default_rng(5)
    X = np.column_stack([np.ones(5000), rng.standard_normal((5000, 2))])
    y = rng.poisson(np.exp(X @ np.array([2.0, 0.3, -0.2]))).astype(float)
    rows, _ = fit_negative_binomial(X, y, ["const", "x1", "x2"])
    assert rows[-1].name == "alpha" and rows[-1].coef < 0.05
    report("nb2-regression", started)


def test_feature_schema_and_composition():
    started = time.monotonic()
    canon = Lexicon()
    for i in range(403):
        canon.add(f"phrase{i:03d}", [("movement", "foes", "heroes")[i % 3]], SEED)
    categories = [
        CategoryLexicon(name=f"cat{i}", patterns=(f"word{i}", f"pre{i}*"))
        for i in range(19)
    ]
    schema = build_schema(canon, categories)
    assert len(schema) == 483
    assert schema.family_sizes() == {
        "canon": 403, "category": 19, "ic": 1,
        "credibility": 8, "feedback": 2, "sif": 50,
    }

    docs = [
        ResolvedText(f"doc{i:03d}", f"phrase{i:03d} word{i % 19} maybe but thus w{i}?")
        for i in range(20)
    ]
    vocab = unigram_vocab(docs)
    seqs = {s.comment_id: s for s in sequences_for(docs, vocab)}
    table = factorize(pmi(count_cooc(seqs.values(), vocab, window=5)), k=50, seed=0)
    sif = SifModel.build(table, vocab)
    sif.fit_common_component(seqs.values())
    ctx = ExtractionContext(
        canon=canon, categories=categories, cues=DEFAULT_CUE_LISTS,
        sif=sif, scorer=ConnectiveIcScorer(),
    )
    comments = [
        make_comment(d.comment_id, body=d.text, parent_id=None if i % 4 == 0 else f"doc{i-1:03d}",
                     thread_id="t", score=i - 7)
        for i, d in enumerate(docs)
    ]
    by_id = {c.id: c for c in comments}
    parents = {c.id: by_id.get(c.parent_id) if c.parent_id else None for c in comments}
    matrix = extract_all(ctx, comments, parents, seqs)
    assert matrix.values.shape == (20, 483)
    for idx, comment in enumerate(comments):
        seq = seqs[comment.id]
        expected = [canon_counts(seq, canon)[p] for p in sorted(canon.phrases)]
        expected += category_counts(comment.body, categories)
        expected.append(ic_score(comment.body, ctx.scorer))
        expected += credibility_cues(comment.body, DEFAULT_CUE_LISTS)
        score, sync, _ = feedback(comment, parents[comment.id])
        expected += [score, sync]
        expected += list(sif.vector(seq))
        np.testing.assert_allclose(matrix.values[idx], expected, atol=1e-12)
    report("feature-schema-and-composition", started)


def test_end_to_end_determinism(tmp_path):
    started = time.monotonic()
    from lexloop.cli import main
    from pipeline_fixture import build
    from test_cli import PIPELINE

    fx = build(tmp_path / "fixture")
    digests = []
    for run in ("one", "two"):
        ws = tmp_path / f"ws_{run}"
        for command, arg_fn in PIPELINE:
            argv = ["--workspace", str(ws), "--config", str(fx["config"]), command] + arg_fn(fx)
            assert main(argv) == 0, f"{command} failed on run {run}"
        registry = json.loads((ws / "registry.json").read_text())
        digests.append(
            {
                name: hashlib.sha256((ws / name).read_bytes()).hexdigest()
                for name in sorted(registry)
            }
        )
    assert digests[0] == digests[1]
    assert len(digests[0]) >= 12
    report("end-to-end-determinism", started)
