"""Workspace: a directory of named pipeline artifacts with content hashes and
declared upstream edges. An artifact is only served for consumption when the
upstream hashes recorded at write time still match the registry, so stale
intermediate files fail loudly instead of corrupting downstream runs."""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path
from typing import Optional


class WorkspaceError(Exception):
    pass


class StaleArtifactError(WorkspaceError):
    def __init__(self, artifact: str, upstream: str, recorded: str, current: str):
        super().__init__(
            f"artifact {artifact!r} is stale: upstream {upstream!r} hash was "
            f"{recorded[:12]}... at build time but is now {current[:12]}..."
        )
        self.artifact = artifact
        self.upstream = upstream
        self.recorded = recorded
        self.current = current


def file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Workspace:
    REGISTRY_NAME = "registry.json"

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._registry_path = self.root / self.REGISTRY_NAME
        self.registry: dict[str, dict] = {}
        if self._registry_path.exists():
            self.registry = json.loads(self._registry_path.read_text())

    def _save(self) -> None:
        self._registry_path.write_text(json.dumps(self.registry, sort_keys=True, indent=1))

    def artifact_path(self, name: str) -> Path:
        return self.root / name

    def register(self, name: str, upstream: tuple[str, ...] = ()) -> str:
        """Hash the just-written artifact file and record its upstream edges
        (by their current hashes)."""
        path = self.artifact_path(name)
        if not path.exists():
            raise WorkspaceError(f"cannot register missing artifact file {path}")
        edges = {}
        for up in upstream:
            if up not in self.registry:
                raise WorkspaceError(f"upstream artifact {up!r} is not registered")
            edges[up] = self.registry[up]["sha256"]
        digest = file_hash(path)
        self.registry[name] = {"sha256": digest, "upstream": edges}
        self._save()
        return digest

    def hash_of(self, name: str) -> str:
        if name not in self.registry:
            raise WorkspaceError(f"artifact {name!r} is not registered")
        return self.registry[name]["sha256"]

    def hashes(self) -> dict[str, str]:
        return {name: entry["sha256"] for name, entry in sorted(self.registry.items())}

    def open_artifact(self, name: str) -> Path:
        """Path of a registered artifact, refused when any upstream drifted."""
        if name not in self.registry:
            raise WorkspaceError(f"artifact {name!r} is not registered; run its stage first")
        entry = self.registry[name]
        for upstream, recorded in entry["upstream"].items():
            if upstream not in self.registry:
                raise StaleArtifactError(name, upstream, recorded, "<missing>")
            current = self.registry[upstream]["sha256"]
            if current != recorded:
                raise StaleArtifactError(name, upstream, recorded, current)
        path = self.artifact_path(name)
        if not path.exists():
            raise WorkspaceError(f"artifact file missing on disk: {path}")
        return path


DEFAULT_CONFIG = {
    "corpus": {"field_map": ""},
    "vocab": {
        "min_count": "25",
        "score_threshold": "10.0",
        "discount": "5.0",
        "resolver": "nearest-antecedent",
    },
    "embed": {
        "window": "5",
        "k": "200",
        "seed": "13",
        "weighting": "0.5",
        "stop_fraction": "0.001",
        "sif_k": "50",
    },
    "lexicon": {"seed_file": "", "suggest_n": "10"},
    "features": {"categories_file": "", "cues_file": "", "sif_a": "1e-3"},
    "pool": {
        "random_n": "100000",
        "seed": "17",
        "k": "3",
        "n_per_extreme": "20000",
    },
    "learner": {
        "seed": "23",
        "eval_interval": "50",
        "tau": "0.6",
        "grid": "small",
    },
    "importance": {"l1_ratio": "0.5", "seed": "29", "lam_values": "20", "decades": "4.0", "top_n": "25"},
    "its": {"window_weeks": "13", "event_label": "dissonance", "scope": "inside", "community": ""},
    "tenure": {
        "ban_time": "",
        "community": "",
        "first_n": "100",
        "censor_days": "30",
        "regressors": "born,created,belief,dissonance,min_score,avg_score,max_score",
    },
    "service": {"host": "127.0.0.1", "port": "8787"},
}


def load_config(path: Optional[Path]) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.read_dict(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    return parser
