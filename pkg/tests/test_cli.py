import hashlib
import json
from pathlib import Path

import pytest

from lexloop.cli import main

from pipeline_fixture import build

PIPELINE = [
    ("ingest", lambda fx: ["--input", str(fx["records"])]),
    ("vocab", lambda fx: []),
    ("embed", lambda fx: []),
    ("features", lambda fx: ["--canon", str(fx["seed"])]),
    ("pool", lambda fx: ["--kind", "random"]),
    ("pool", lambda fx: ["--kind", "biased"]),
    (
        "train",
        lambda fx: [
            "--labels-random", str(fx["labels_a"]),
            "--labels-biased", str(fx["labels_b"]),
        ],
    ),
    ("predict", lambda fx: []),
    ("importance", lambda fx: ["--labels", str(fx["labels_analysis"])]),
    ("its", lambda fx: ["--labels", str(fx["labels_analysis"])]),
    ("tenure", lambda fx: ["--labels", str(fx["labels_analysis"])]),
]


def run_pipeline(ws: Path, fx: dict) -> None:
    for command, arg_fn in PIPELINE:
        argv = ["--workspace", str(ws), "--config", str(fx["config"]), command] + arg_fn(fx)
        code = main(argv)
        assert code == 0, f"{command} failed"


def artifact_hashes(ws: Path) -> dict[str, str]:
    registry = json.loads((ws / "registry.json").read_text())
    out = {}
    for name in registry:
        out[name] = hashlib.sha256((ws / name).read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture")
    return build(root)


class TestPipeline:
    def test_embed_before_vocab_is_dependency_error(self, tmp_path, fixture_dir):
        ws = tmp_path / "ws"
        code = main(["--workspace", str(ws), "--config", str(fixture_dir["config"]), "embed"])
        assert code != 0

    def test_full_pipeline_registers_artifacts(self, tmp_path, fixture_dir):
        ws = tmp_path / "ws"
        run_pipeline(ws, fixture_dir)
        registry = json.loads((ws / "registry.json").read_text())
        for name in (
            "corpus.jsonl", "vocab.txt", "embeddings.bin", "embeddings_sif.bin",
            "features.bin", "pool_random.txt", "pool_biased.txt", "models.pkl",
            "predictions.jsonl", "importance_report.txt", "its_report.txt",
            "tenure_report.txt",
        ):
            assert name in registry, f"{name} not registered"

    def test_stale_dependency_refused(self, tmp_path, fixture_dir):
        ws = tmp_path / "ws"
        run_pipeline(ws, fixture_dir)
        # rebuild vocab with different settings -> embeddings become stale
        cfg = tmp_path / "other.ini"
        cfg.write_text(fixture_dir["config"].read_text().replace("min_count = 5", "min_count = 4"))
        assert main(["--workspace", str(ws), "--config", str(cfg), "vocab"]) == 0
        code = main([
            "--workspace", str(ws), "--config", str(fixture_dir["config"]), "features",
            "--canon", str(fixture_dir["seed"]),
        ])
        assert code == 2  # stale upstream exit code

    def test_repeat_features_byte_identical(self, tmp_path, fixture_dir):
        ws = tmp_path / "ws"
        run_pipeline(ws, fixture_dir)
        before = (ws / "features.bin").read_bytes()
        code = main([
            "--workspace", str(ws), "--config", str(fixture_dir["config"]), "features",
            "--canon", str(fixture_dir["seed"]),
        ])
        assert code == 0
        assert (ws / "features.bin").read_bytes() == before
