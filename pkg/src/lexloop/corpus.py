"""Threaded-discussion ingestion: line-delimited records in, comment trees out.

A corpus is an immutable, deduplicated id -> Comment map. Trees are rebuilt
from parent pointers; replies whose parents are missing from the corpus are
kept as orphan-rooted trees so their text still reaches downstream stages.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, TextIO

CORPUS_FORMAT_VERSION = 1

# Bodies that carry structure but no usable text.
EMPTY_BODIES = {"", "[deleted]", "[removed]"}

DEFAULT_FIELD_MAP = {
    "id": "id",
    "parent_id": "parent_id",
    "thread_id": "thread_id",
    "community": "community",
    "author": "author",
    "created_at": "created_at",
    "body": "body",
    "score": "score",
    "kind": "kind",
}

REQUIRED_FIELDS = ("id", "body", "created_at")


class CorpusError(Exception):
    """Raised for unrecoverable corpus-level problems (e.g. cycles)."""


@dataclass(frozen=True)
class Comment:
    id: str
    parent_id: Optional[str]
    thread_id: str
    community: str
    author: str
    created_at: int
    body: str
    score: int
    kind: str  # "post" | "comment"

    @property
    def empty_text(self) -> bool:
        return self.body.strip() in EMPTY_BODIES

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "parent_id": self.parent_id,
            "thread_id": self.thread_id,
            "community": self.community,
            "author": self.author,
            "created_at": self.created_at,
            "body": self.body,
            "score": self.score,
            "kind": self.kind,
        }


@dataclass(frozen=True)
class RejectEntry:
    line_number: int
    reason: str

    def to_record(self) -> dict:
        return {"line_number": self.line_number, "reason": self.reason}


@dataclass
class Corpus:
    comments: dict[str, Comment]
    rejects: list[RejectEntry] = field(default_factory=list)
    duplicate_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.comments)

    def __iter__(self) -> Iterator[Comment]:
        return iter(self.comments.values())

    def get(self, comment_id: str) -> Optional[Comment]:
        return self.comments.get(comment_id)


@dataclass
class CommentTree:
    """One rooted thread: adjacency keeps child insertion order."""

    root: Comment
    nodes: dict[str, Comment]
    children: dict[str, list[str]]

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def orphan_rooted(self) -> bool:
        return self.root.kind != "post"


@dataclass(frozen=True)
class PairContext:
    parent: Optional[Comment]
    child: Comment


@dataclass
class TreeSet:
    trees: list[CommentTree]          # rooted at posts
    orphan_trees: list[CommentTree]   # rooted at replies with missing parents

    def all_trees(self) -> Iterator[CommentTree]:
        yield from self.trees
        yield from self.orphan_trees

    @property
    def orphan_count(self) -> int:
        return sum(len(t) for t in self.orphan_trees)


def _coerce_record(raw: dict, field_map: dict[str, str]) -> Comment:
    def pick(key: str, default=None):
        src = field_map.get(key, key)
        return raw.get(src, default)

    for key in REQUIRED_FIELDS:
        if pick(key) is None:
            raise ValueError(f"missing field {field_map.get(key, key)!r}")

    comment_id = str(pick("id"))
    parent_id = pick("parent_id")
    parent_id = str(parent_id) if parent_id not in (None, "") else None
    kind = pick("kind")
    if kind not in ("post", "comment"):
        kind = "post" if parent_id is None else "comment"
    if kind == "post":
        parent_id = None
    thread_id = pick("thread_id")
    thread_id = str(thread_id) if thread_id not in (None, "") else comment_id

    created_at = int(pick("created_at"))
    if created_at < 0:
        raise ValueError("created_at must be >= 0")
    score = pick("score", 0)
    score = int(score) if score is not None else 0

    return Comment(
        id=comment_id,
        parent_id=parent_id,
        thread_id=thread_id,
        community=str(pick("community", "") or ""),
        author=str(pick("author", "") or ""),
        created_at=created_at,
        body=str(pick("body")),
        score=score,
        kind=kind,
    )


def ingest(stream: Iterable[str], field_map: Optional[dict[str, str]] = None) -> Corpus:
    """Parse line-delimited records into a deduplicated Corpus.

    Malformed lines land in the reject report with their line number;
    duplicate ids keep the first occurrence. The same stream always yields a
    bit-identical corpus (insertion order of first occurrence).
    """
    fmap = dict(DEFAULT_FIELD_MAP)
    if field_map:
        fmap.update(field_map)

    comments: dict[str, Comment] = {}
    rejects: list[RejectEntry] = []
    duplicates: list[str] = []
    for line_number, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
            if not isinstance(raw, dict):
                raise ValueError("record is not an object")
            comment = _coerce_record(raw, fmap)
        except (ValueError, json.JSONDecodeError) as exc:
            rejects.append(RejectEntry(line_number=line_number, reason=str(exc)))
            continue
        if comment.id in comments:
            duplicates.append(comment.id)
            continue
        comments[comment.id] = comment
    return Corpus(comments=comments, rejects=rejects, duplicate_ids=duplicates)


def load_field_map(stream: TextIO) -> dict[str, str]:
    """Read a `canonical_key = source_field` mapping file."""
    mapping: dict[str, str] = {}
    for line in stream:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping


def _trace_cycle(start: str, parents: dict[str, str]) -> list[str]:
    seen: list[str] = []
    node = start
    while node not in seen:
        seen.append(node)
        node = parents[node]
    return seen[seen.index(node):]


def build_trees(corpus: Corpus) -> TreeSet:
    """Rebuild one tree per post plus orphan-rooted trees for stray replies.

    Raises CorpusError naming the offending ids when parent pointers form a
    cycle (corrupt data).
    """
    children: dict[str, list[str]] = {c.id: [] for c in corpus}
    roots: list[Comment] = []
    orphan_roots: list[Comment] = []
    for comment in corpus:
        if comment.kind == "post" or comment.parent_id is None:
            roots.append(comment)
        elif comment.parent_id not in corpus.comments:
            orphan_roots.append(comment)
        else:
            children[comment.parent_id].append(comment.id)

    def grow(root: Comment) -> CommentTree:
        nodes: dict[str, Comment] = {}
        queue = deque([root.id])
        while queue:
            node_id = queue.popleft()
            nodes[node_id] = corpus.comments[node_id]
            queue.extend(children[node_id])
        return CommentTree(
            root=root,
            nodes=nodes,
            children={nid: list(children[nid]) for nid in nodes},
        )

    trees = [grow(r) for r in roots]
    orphan_trees = [grow(r) for r in orphan_roots]

    reached = sum(len(t) for t in trees) + sum(len(t) for t in orphan_trees)
    if reached != len(corpus):
        reachable: set[str] = set()
        for tree in trees + orphan_trees:
            reachable.update(tree.nodes)
        stranded = [cid for cid in corpus.comments if cid not in reachable]
        parents = {cid: corpus.comments[cid].parent_id for cid in stranded}
        cycle = _trace_cycle(stranded[0], parents)  # type: ignore[arg-type]
        raise CorpusError(f"cycle detected among comment ids: {cycle}")

    return TreeSet(trees=trees, orphan_trees=orphan_trees)


def pairs(tree: CommentTree) -> list[PairContext]:
    """Emit (parent, child) contexts in breadth-first order.

    The root appears once with parent=None; every other node appears exactly
    once as the child of its parent.
    """
    out = [PairContext(parent=None, child=tree.root)]
    queue = deque([tree.root.id])
    while queue:
        node_id = queue.popleft()
        parent = tree.nodes[node_id]
        for child_id in tree.children.get(node_id, []):
            out.append(PairContext(parent=parent, child=tree.nodes[child_id]))
            queue.append(child_id)
    return out


def save_corpus(corpus: Corpus, stream: TextIO) -> None:
    """Line-delimited snapshot with a version header; byte-stable."""
    header = {
        "format": "lexloop-corpus",
        "version": CORPUS_FORMAT_VERSION,
        "count": len(corpus),
        "rejected": len(corpus.rejects),
        "duplicates": len(corpus.duplicate_ids),
    }
    stream.write(json.dumps(header, sort_keys=True) + "\n")
    for comment in corpus:
        stream.write(json.dumps(comment.to_record(), sort_keys=True) + "\n")


def load_corpus(stream: TextIO) -> Corpus:
    header_line = stream.readline()
    header = json.loads(header_line)
    if header.get("format") != "lexloop-corpus":
        raise CorpusError("not a corpus snapshot")
    if header.get("version") != CORPUS_FORMAT_VERSION:
        raise CorpusError(f"unsupported corpus version {header.get('version')}")
    comments: dict[str, Comment] = {}
    for line in stream:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        comment = Comment(**rec)
        comments[comment.id] = comment
    if len(comments) != header["count"]:
        raise CorpusError("snapshot truncated: count mismatch")
    return Corpus(comments=comments)


def save_rejects(corpus: Corpus, stream: TextIO) -> None:
    for entry in corpus.rejects:
        stream.write(json.dumps(entry.to_record(), sort_keys=True) + "\n")
