"""Command-line pipeline driver.

Every subcommand reads its configuration and upstream artifacts from the
workspace, writes registered outputs, and fails with a nonzero exit when an
upstream artifact is stale or missing. Outputs are byte-deterministic for
fixed inputs and seeds."""

from __future__ import annotations

import argparse
import json
import pickle
import shutil
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import embed as embed_mod
from . import engagement as engagement_mod
from . import features as features_mod
from . import importance as importance_mod
from . import learner as learner_mod
from . import lexicon as lexicon_mod
from . import sampling as sampling_mod
from . import textprep
from .service.state import (
    ServiceState,
    parent_map,
    replay_journal,
    resolve_corpus,
    tokenize_corpus,
)
from .service.workspace import StaleArtifactError, Workspace, WorkspaceError, load_config

SMALL_RF_GRID = {"n_estimators": [50], "max_depth": [None, 4], "min_samples_leaf": [1]}
SMALL_GB_GRID = {"n_estimators": [50], "learning_rate": [0.1], "max_depth": [2, 3]}


class CliError(Exception):
    pass


def _load_corpus(ws: Workspace) -> corpus_mod.Corpus:
    with open(ws.open_artifact("corpus.jsonl")) as fh:
        return corpus_mod.load_corpus(fh)


def _load_vocab(ws: Workspace) -> textprep.PhraseVocab:
    with open(ws.open_artifact("vocab.txt")) as fh:
        return textprep.load_vocab(fh)


def _load_embeddings(ws: Workspace, name: str, vocab: textprep.PhraseVocab):
    with open(ws.open_artifact(name), "rb") as fh:
        return embed_mod.load_embeddings(fh, embed_mod.vocab_hash(vocab))


def _load_canon(ws: Workspace) -> lexicon_mod.Lexicon:
    path = ws.open_artifact("canon.txt")
    with open(path) as fh:
        first = fh.read(2)
    with open(path) as fh:
        if first.startswith("#{"):
            return lexicon_mod.load_canon(fh)
        return lexicon_mod.load_seed(fh)


def _load_features(ws: Workspace) -> features_mod.FeatureMatrix:
    with open(ws.open_artifact("features.bin"), "rb") as fh:
        return features_mod.load_matrix(fh)


def _load_labels(ws: Workspace, name: str) -> sampling_mod.LabeledSet:
    with open(ws.open_artifact(name)) as fh:
        return sampling_mod.load_labeled(fh)


def _resolver(cfg) -> textprep.CorefResolver:
    name = cfg.get("vocab", "resolver")
    if name == "identity":
        return textprep.IdentityResolver()
    if name == "nearest-antecedent":
        return textprep.NearestAntecedentResolver()
    raise CliError(f"unknown resolver {name!r}")


def _categories(cfg) -> list[features_mod.CategoryLexicon]:
    path = cfg.get("features", "categories_file")
    if path:
        with open(path) as fh:
            return features_mod.load_category_file(fh)
    return features_mod.default_categories()


def _cues(cfg) -> features_mod.CueLists:
    path = cfg.get("features", "cues_file")
    if path:
        with open(path) as fh:
            return features_mod.load_cue_file(fh)
    return features_mod.DEFAULT_CUE_LISTS


def cmd_ingest(ws: Workspace, cfg, args) -> None:
    field_map = None
    map_path = cfg.get("corpus", "field_map")
    if map_path:
        with open(map_path) as fh:
            field_map = corpus_mod.load_field_map(fh)
    with open(args.input) as fh:
        corp = corpus_mod.ingest(fh, field_map)
    with open(ws.artifact_path("corpus.jsonl"), "w") as fh:
        corpus_mod.save_corpus(corp, fh)
    with open(ws.artifact_path("rejects.jsonl"), "w") as fh:
        corpus_mod.save_rejects(corp, fh)
    ws.register("corpus.jsonl")
    ws.register("rejects.jsonl", upstream=("corpus.jsonl",))
    print(f"ingested {len(corp)} comments, {len(corp.rejects)} rejects")


def cmd_vocab(ws: Workspace, cfg, args) -> None:
    corp = _load_corpus(ws)
    resolved = resolve_corpus(corp, _resolver(cfg))
    vocab = textprep.learn_vocab(
        resolved,
        min_count=cfg.getint("vocab", "min_count"),
        score_threshold=cfg.getfloat("vocab", "score_threshold"),
        discount=cfg.getfloat("vocab", "discount"),
    )
    with open(ws.artifact_path("vocab.txt"), "w") as fh:
        textprep.save_vocab(vocab, fh)
    ws.register("vocab.txt", upstream=("corpus.jsonl",))
    print(f"learned vocabulary of {len(vocab)} phrases")


def cmd_embed(ws: Workspace, cfg, args) -> None:
    corp = _load_corpus(ws)
    vocab = _load_vocab(ws)
    resolved = resolve_corpus(corp, _resolver(cfg))
    sequences = tokenize_corpus(resolved, vocab)
    stop_ids = embed_mod.build_stoplist(vocab, cfg.getfloat("embed", "stop_fraction"))
    cooc = embed_mod.count_cooc(
        sequences.values(), vocab, window=cfg.getint("embed", "window"), stop_ids=stop_ids
    )
    pm = embed_mod.pmi(cooc)
    seed = cfg.getint("embed", "seed")
    weighting = cfg.getfloat("embed", "weighting")
    k = min(cfg.getint("embed", "k"), len(vocab))
    table = embed_mod.factorize(pm, k=k, seed=seed, weighting=weighting)
    with open(ws.artifact_path("embeddings.bin"), "wb") as fh:
        embed_mod.save_embeddings(table, fh)
    sif_k = min(cfg.getint("embed", "sif_k"), len(vocab))
    sif_table = embed_mod.factorize(pm, k=sif_k, seed=seed, weighting=weighting)
    with open(ws.artifact_path("embeddings_sif.bin"), "wb") as fh:
        embed_mod.save_embeddings(sif_table, fh)
    ws.register("embeddings.bin", upstream=("corpus.jsonl", "vocab.txt"))
    ws.register("embeddings_sif.bin", upstream=("corpus.jsonl", "vocab.txt"))
    print(f"embeddings: rank {k} (+{sif_k} for documents) over {len(vocab)} phrases")


def cmd_features(ws: Workspace, cfg, args) -> None:
    shutil.copyfile(args.canon, ws.artifact_path("canon.txt"))
    ws.register("canon.txt")
    corp = _load_corpus(ws)
    vocab = _load_vocab(ws)
    canon = _load_canon(ws)
    sif_table = _load_embeddings(ws, "embeddings_sif.bin", vocab)
    resolved = resolve_corpus(corp, _resolver(cfg))
    sequences = tokenize_corpus(resolved, vocab)
    sif = features_mod.SifModel.build(sif_table, vocab, a=cfg.getfloat("features", "sif_a"))
    sif.fit_common_component([sequences[c.id] for c in corp])
    ctx = features_mod.ExtractionContext(
        canon=canon,
        categories=_categories(cfg),
        cues=_cues(cfg),
        sif=sif,
        scorer=features_mod.ConnectiveIcScorer(),
    )
    matrix = features_mod.extract_all(ctx, list(corp), parent_map(corp), sequences)
    with open(ws.artifact_path("features.bin"), "wb") as fh:
        features_mod.save_matrix(matrix, fh)
    ws.register(
        "features.bin",
        upstream=("corpus.jsonl", "vocab.txt", "embeddings_sif.bin", "canon.txt"),
    )
    print(f"extracted {matrix.values.shape[0]}x{matrix.values.shape[1]} feature matrix")


def cmd_pool(ws: Workspace, cfg, args) -> None:
    seed = cfg.getint("pool", "seed")
    if args.kind == "random":
        corp = _load_corpus(ws)
        n = min(cfg.getint("pool", "random_n"), len(corp))
        pool = sampling_mod.random_pool([c.id for c in corp], n, seed)
        name = "pool_random.txt"
        upstream = ("corpus.jsonl",)
    else:
        matrix = _load_features(ws)
        pool = sampling_mod.biased_pool(
            matrix,
            k=cfg.getint("pool", "k"),
            n_per_extreme=cfg.getint("pool", "n_per_extreme"),
            seed=seed,
        )
        name = "pool_biased.txt"
        upstream = ("features.bin",)
    with open(ws.artifact_path(name), "w") as fh:
        sampling_mod.save_pool(pool, fh)
    ws.register(name, upstream=upstream)
    print(f"{args.kind} pool: {len(pool)} comments")


def _register_labels(ws: Workspace, path: str, name: str) -> None:
    shutil.copyfile(path, ws.artifact_path(name))
    ws.register(name)


def cmd_train(ws: Workspace, cfg, args) -> None:
    _register_labels(ws, args.labels_random, "labels_random.jsonl")
    _register_labels(ws, args.labels_biased, "labels_biased.jsonl")
    matrix = _load_features(ws)
    seed = cfg.getint("learner", "seed")
    labeled_r = sampling_mod.one_sided_select(
        _load_labels(ws, "labels_random.jsonl"), matrix, seed=seed
    )
    labeled_b = sampling_mod.one_sided_select(
        _load_labels(ws, "labels_biased.jsonl"), matrix, seed=seed
    )
    grids = (
        (SMALL_RF_GRID, SMALL_GB_GRID)
        if cfg.get("learner", "grid") == "small"
        else (learner_mod.DEFAULT_RF_GRID, learner_mod.DEFAULT_GB_GRID)
    )
    pair = learner_mod.train_final(
        labeled_r, labeled_b, matrix, seed=seed, rf_grid=grids[0], gb_grid=grids[1]
    )
    with open(ws.artifact_path("models.pkl"), "wb") as fh:
        pickle.dump(pair, fh, protocol=4)
    with open(ws.artifact_path("grid_trace.json"), "w") as fh:
        json.dump(
            {"random_forest": pair.trace_random, "gradient_boosting": pair.trace_biased},
            fh,
            sort_keys=True,
            indent=1,
        )
    ws.register("models.pkl", upstream=("features.bin", "labels_random.jsonl", "labels_biased.jsonl"))
    ws.register("grid_trace.json", upstream=("models.pkl",))
    print(
        f"trained models on {len(labeled_r)} random / {len(labeled_b)} biased "
        "one-sided-selected labels"
    )


def cmd_predict(ws: Workspace, cfg, args) -> None:
    matrix = _load_features(ws)
    with open(ws.open_artifact("models.pkl"), "rb") as fh:
        pair = pickle.load(fh)
    order = np.argsort(matrix.comment_ids)
    ids = [matrix.comment_ids[i] for i in order]
    X = matrix.values[order]
    dists_a = pair.model_random.predict_dist(X)
    dists_b = pair.model_biased.predict_dist(X)
    outcomes = [
        learner_mod.pool_predictions(a, b, "consensus").outcome
        for a, b in zip(dists_a, dists_b)
    ]
    with open(ws.artifact_path("predictions.jsonl"), "w") as fh:
        learner_mod.save_predictions(ids, dists_a, dists_b, outcomes, fh)
    ws.register("predictions.jsonl", upstream=("features.bin", "models.pkl"))
    abstained = sum(1 for o in outcomes if o == "abstain")
    print(f"predicted {len(ids)} comments, {abstained} abstentions")


def cmd_importance(ws: Workspace, cfg, args) -> None:
    _register_labels(ws, args.labels, "labels_importance.jsonl")
    matrix = _load_features(ws)
    labeled = _load_labels(ws, "labels_importance.jsonl")
    canon = _load_canon(ws)
    categories = _categories(cfg)
    schema = features_mod.build_schema(canon, categories)
    if schema.hash != matrix.schema_hash:
        raise CliError("feature matrix schema does not match canon/categories")
    labels_by_id = labeled.labels_by_id()
    rows = [i for i, cid in enumerate(matrix.comment_ids) if cid in labels_by_id]
    X = matrix.values[rows]
    y = [labels_by_id[matrix.comment_ids[i]] for i in rows]
    l1_ratio = cfg.getfloat("importance", "l1_ratio")
    Xs = importance_mod._standardize_design(X)[0]
    onehot = importance_mod._one_hot(y)
    lam_top = importance_mod.lambda_max(Xs, onehot - onehot.mean(axis=0), l1_ratio)
    path = importance_mod.default_lambda_path(
        lam_top,
        n_values=cfg.getint("importance", "lam_values"),
        decades=cfg.getfloat("importance", "decades"),
    )
    report = importance_mod.fit_importance(
        X,
        y,
        slot_names=[s.name for s in schema.slots],
        lam_path=path,
        l1_ratio=l1_ratio,
        seed=cfg.getint("importance", "seed"),
    )
    tags = importance_mod.build_slot_tags(schema, canon)
    with open(ws.artifact_path("importance_report.txt"), "w") as fh:
        importance_mod.save_report(report, fh, tags=tags, n=cfg.getint("importance", "top_n"))
    ws.register(
        "importance_report.txt", upstream=("features.bin", "labels_importance.jsonl")
    )
    print(f"importance fitted at lambda={report.lam:.6g}")


def _event_times(
    corp: corpus_mod.Corpus, labeled: sampling_mod.LabeledSet, label: str, community: str
) -> dict[str, int]:
    """First disclosure of the given label per user."""
    events: dict[str, int] = {}
    labels_by_id = labeled.labels_by_id()
    for comment in corp:
        if community and comment.community != community:
            continue
        if labels_by_id.get(comment.id) != label:
            continue
        if comment.author not in events or comment.created_at < events[comment.author]:
            events[comment.author] = comment.created_at
    return events


def cmd_its(ws: Workspace, cfg, args) -> None:
    _register_labels(ws, args.labels, "labels_its.jsonl")
    corp = _load_corpus(ws)
    labeled = _load_labels(ws, "labels_its.jsonl")
    community = cfg.get("its", "community")
    scope = cfg.get("its", "scope")
    label = cfg.get("its", "event_label")
    events = _event_times(corp, labeled, label, community)
    histories: dict[str, list[int]] = {}
    for comment in corp:
        inside = (not community) or comment.community == community
        if (scope == "inside") == inside:
            histories.setdefault(comment.author, []).append(comment.created_at)
    observations, excluded = engagement_mod.encode_all(
        histories, events, window_weeks=cfg.getint("its", "window_weeks"), scope=scope
    )
    fit = engagement_mod.fit_its(observations, scope=scope)
    title = f"interrupted time series ({label} events, scope={scope})"
    extra = f"n_observations={fit.n_observations} users_excluded={len(excluded)}"
    with open(ws.artifact_path("its_report.txt"), "w") as fh:
        fh.write(engagement_mod.format_table(title, fit.rows, extra))
        fh.write(
            f"\npost-event slope (week + weeks_since): {fit.post_slope:+.6f}\n"
            + engagement_mod.format_table("piecewise post fit", [fit.piecewise_post])
        )
    with open(ws.artifact_path("its_coefficients.jsonl"), "w") as fh:
        engagement_mod.save_coefficients(fit.rows + [fit.piecewise_post], fh)
    with open(ws.artifact_path("its_plot.json"), "w") as fh:
        json.dump(engagement_mod.its_plot_data(observations, fit), fh, sort_keys=True, indent=1)
    ws.register("its_report.txt", upstream=("corpus.jsonl", "labels_its.jsonl"))
    ws.register("its_coefficients.jsonl", upstream=("its_report.txt",))
    ws.register("its_plot.json", upstream=("its_report.txt",))
    print(f"ITS fit over {fit.n_observations} observations ({len(excluded)} users excluded)")


def cmd_tenure(ws: Workspace, cfg, args) -> None:
    _register_labels(ws, args.labels, "labels_tenure.jsonl")
    corp = _load_corpus(ws)
    labeled = _load_labels(ws, "labels_tenure.jsonl")
    community = cfg.get("tenure", "community")
    ban_raw = cfg.get("tenure", "ban_time")
    if not ban_raw:
        raise CliError("tenure requires [tenure] ban_time in the config")
    comments_by_user: dict[str, list[tuple[int, str, int]]] = {}
    for comment in corp:
        if community and comment.community != community:
            continue
        comments_by_user.setdefault(comment.author, []).append(
            (comment.created_at, comment.id, comment.score)
        )
    records = engagement_mod.build_tenure(
        comments_by_user,
        labeled.labels_by_id(),
        ban_time=int(ban_raw),
        first_n=cfg.getint("tenure", "first_n"),
        censor_days=cfg.getint("tenure", "censor_days"),
    )
    regressors = [r.strip() for r in cfg.get("tenure", "regressors").split(",") if r.strip()]
    report_lines = []
    all_rows = []
    for model in engagement_mod.TENURE_MODELS:
        fit = engagement_mod.fit_tenure(records, model, regressors=regressors)
        extra = f"n={fit.n_records} censored={fit.n_censored}"
        if fit.log_likelihood is not None:
            extra += f" loglik={fit.log_likelihood:.4f}"
        report_lines.append(engagement_mod.format_table(f"tenure model: {model}", fit.rows, extra))
        all_rows.extend(fit.rows)
    with open(ws.artifact_path("tenure_report.txt"), "w") as fh:
        fh.write("\n".join(report_lines))
    with open(ws.artifact_path("tenure_coefficients.jsonl"), "w") as fh:
        engagement_mod.save_coefficients(all_rows, fh)
    ws.register("tenure_report.txt", upstream=("corpus.jsonl", "labels_tenure.jsonl"))
    ws.register("tenure_coefficients.jsonl", upstream=("tenure_report.txt",))
    print(f"tenure models fitted over {len(records)} records")


def build_service_state(ws: Workspace, cfg, with_annotation: bool = True) -> ServiceState:
    corp = _load_corpus(ws)
    vocab = _load_vocab(ws)
    table = _load_embeddings(ws, "embeddings.bin", vocab)
    resolved = resolve_corpus(corp, _resolver(cfg))
    sequences = tokenize_corpus(resolved, vocab)
    evidence = lexicon_mod.EvidenceIndex(sequences.values())
    seed_path = cfg.get("lexicon", "seed_file")
    if not seed_path:
        raise CliError("serving requires [lexicon] seed_file in the config")
    with open(seed_path) as fh:
        lex = lexicon_mod.load_seed(fh)
    session = lexicon_mod.ExpansionSession(
        "service", lex, table, vocab, evidence=evidence
    )
    state = ServiceState(
        corpus=corp,
        parents=parent_map(corp),
        lexicon_session=session,
        artifact_hashes=ws.hashes(),
        journal_path=ws.artifact_path("journal.jsonl"),
    )
    if with_annotation:
        matrix = _load_features(ws)
        with open(ws.open_artifact("pool_random.txt")) as fh:
            pool = sampling_mod.load_pool(fh)
        state.annotate_session = learner_mod.ActiveSession(
            pool,
            matrix,
            seed=cfg.getint("learner", "seed"),
            eval_interval=cfg.getint("learner", "eval_interval"),
            tau=cfg.getfloat("learner", "tau"),
        )
    state.refresh_highlighter()
    if state.journal_path.exists():
        replay_journal(state, state.journal_path)
    return state


def cmd_serve(ws: Workspace, cfg, args) -> None:
    import uvicorn

    from .service.api import create_app

    state = build_service_state(ws, cfg, with_annotation=(args.command == "annotate-serve"))
    static = Path(args.static) if args.static else None
    app = create_app(state, reports_dir=ws.root, static_dir=static)
    uvicorn.run(app, host=cfg.get("service", "host"), port=cfg.getint("service", "port"))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lexloop", description=__doc__)
    parser.add_argument("--workspace", "-w", required=True, help="workspace directory")
    parser.add_argument("--config", "-c", default=None, help="key=value config file (INI sections)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="ingest line-delimited records")
    p.add_argument("--input", required=True)
    sub.add_parser("vocab", help="learn the collocation vocabulary")
    sub.add_parser("embed", help="build phrase embeddings")
    p = sub.add_parser("features", help="extract the feature matrix")
    p.add_argument("--canon", required=True, help="canon or seed lexicon file")
    p = sub.add_parser("pool", help="build an unlabeled pool")
    p.add_argument("--kind", choices=("random", "biased"), required=True)
    p = sub.add_parser("train", help="train the final classifier pair")
    p.add_argument("--labels-random", required=True)
    p.add_argument("--labels-biased", required=True)
    sub.add_parser("predict", help="consensus predictions for all comments")
    p = sub.add_parser("importance", help="multitask elastic net feature importance")
    p.add_argument("--labels", required=True)
    p = sub.add_parser("its", help="interrupted time series around disclosures")
    p.add_argument("--labels", required=True)
    p = sub.add_parser("tenure", help="tenure regressions")
    p.add_argument("--labels", required=True)
    for name in ("lexicon-serve", "annotate-serve"):
        p = sub.add_parser(name, help=f"run the HTTP service ({name.split('-')[0]} loop)")
        p.add_argument("--static", default=None, help="built frontend assets to mount at /ui")

    args = parser.parse_args(argv)
    ws = Workspace(Path(args.workspace))
    cfg = load_config(Path(args.config) if args.config else None)

    handlers = {
        "ingest": cmd_ingest,
        "vocab": cmd_vocab,
        "embed": cmd_embed,
        "features": cmd_features,
        "pool": cmd_pool,
        "train": cmd_train,
        "predict": cmd_predict,
        "importance": cmd_importance,
        "its": cmd_its,
        "tenure": cmd_tenure,
        "lexicon-serve": cmd_serve,
        "annotate-serve": cmd_serve,
    }
    try:
        handlers[args.command](ws, cfg, args)
    except StaleArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (WorkspaceError, CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
