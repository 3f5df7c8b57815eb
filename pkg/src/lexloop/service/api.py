"""JSON-over-HTTP API for the two human-in-the-loop workflows.

Single-session server: one lexicon expansion session and one annotation
session at a time. Mutations are serialized under the state lock and
journaled; every payload carries the workspace artifact hashes so a client
can detect server-side rebuilds."""

from __future__ import annotations

from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from ..learner import LearnerError
from ..lexicon import LexiconError, normalize_phrase
from ..sampling import LABELS
from .state import ServiceState, comment_payload


class AcceptRequest(BaseModel):
    phrase: str
    dimensions: list[str]


class RejectRequest(BaseModel):
    phrase: str


class LabelRequest(BaseModel):
    comment_id: str
    label: str


class SkipRequest(BaseModel):
    comment_id: str


def create_app(state: ServiceState, reports_dir=None, static_dir=None) -> FastAPI:
    app = FastAPI(title="lexloop", version="0.1.0")

    def stamp(payload: dict) -> dict:
        payload["artifacts"] = state.artifact_hashes
        return payload

    # -- lexicon -------------------------------------------------------------

    def _require_lexicon():
        if state.lexicon_session is None:
            raise HTTPException(status_code=503, detail="no lexicon session loaded")
        return state.lexicon_session

    @app.get("/lexicon")
    def get_lexicon() -> dict:
        session = _require_lexicon()
        lex = session.lexicon
        return stamp(
            {
                "dimensions": {d: sorted(m) for d, m in sorted(lex.dimensions.items())},
                "provenance": {
                    p: prov.to_record() for p, prov in sorted(lex.provenance.items())
                },
                "rejected": sorted(session.rejected),
            }
        )

    @app.get("/lexicon/suggest")
    def get_suggest(q: Optional[str] = None, n: int = 10) -> dict:
        session = _require_lexicon()
        result = session.suggest(query=q, n=n)
        body = {
            "kind": result.kind,
            "query": result.query,
            "items": [
                {"phrase": s.phrase, "score": s.score, "evidence": s.evidence}
                for s in result.items
            ],
        }
        if result.kind == "did_you_mean":
            raise HTTPException(status_code=404, detail=stamp(body))
        return stamp(body)

    @app.post("/lexicon/accept")
    def post_accept(req: AcceptRequest) -> dict:
        session = _require_lexicon()
        with state.lock:
            try:
                added = session.accept(req.phrase, req.dimensions)
            except LexiconError as exc:
                raise HTTPException(status_code=404, detail=str(exc))
            state.journal(
                "accept",
                {"phrase": normalize_phrase(req.phrase), "dimensions": sorted(req.dimensions)},
            )
            state.refresh_highlighter()
        return stamp({"added": added, "phrase": normalize_phrase(req.phrase)})

    @app.post("/lexicon/reject")
    def post_reject(req: RejectRequest) -> dict:
        session = _require_lexicon()
        with state.lock:
            session.reject(req.phrase)
            state.journal("reject", {"phrase": normalize_phrase(req.phrase)})
        return stamp({"rejected": normalize_phrase(req.phrase)})

    # -- annotation ----------------------------------------------------------

    def _require_annotate():
        if state.annotate_session is None:
            raise HTTPException(status_code=503, detail="no annotation session loaded")
        return state.annotate_session

    @app.get("/annotate/next")
    def get_next() -> dict:
        _require_annotate()
        with state.lock:
            pending = state.next_pending()
        if pending is None:
            return stamp({"comment_id": None, "exhausted": True})
        payload = comment_payload(state, pending) or {}
        return stamp(
            {
                "comment_id": pending,
                "exhausted": False,
                "guidelines": state.guidelines,
                **payload,
            }
        )

    @app.post("/annotate/label")
    def post_label(req: LabelRequest) -> dict:
        session = _require_annotate()
        if req.label not in LABELS:
            raise HTTPException(status_code=422, detail=f"label must be one of {LABELS}")
        with state.lock:
            if state.next_pending() != req.comment_id:
                raise HTTPException(
                    status_code=409,
                    detail=f"comment {req.comment_id} is not the pending item",
                )
            try:
                session.submit_label(req.comment_id, req.label)
            except LearnerError as exc:
                raise HTTPException(status_code=409, detail=str(exc))
            state.pending_id = None
            state.journal("label", {"comment_id": req.comment_id, "label": req.label})
        return stamp(
            {
                "labeled": req.comment_id,
                "n_labels": len(session.labels),
                "complete": session.complete,
            }
        )

    @app.post("/annotate/skip")
    def post_skip(req: SkipRequest) -> dict:
        session = _require_annotate()
        with state.lock:
            if state.next_pending() != req.comment_id:
                raise HTTPException(
                    status_code=409,
                    detail=f"comment {req.comment_id} is not the pending item",
                )
            session.skip(req.comment_id)
            state.pending_id = None
            state.journal("skip", {"comment_id": req.comment_id})
        return stamp({"skipped": req.comment_id})

    @app.get("/annotate/metrics")
    def get_metrics() -> dict:
        session = _require_annotate()
        return stamp(
            {
                "n_labels": len(session.labels),
                "n_skipped": len(session.skipped),
                "eval_interval": session.eval_interval,
                "tau": session.tau,
                "history": session.metric_history,
                "stopped_at": session.stopped_at,
                "complete": session.complete,
            }
        )

    # -- comments & reports ----------------------------------------------------

    @app.get("/comments/{comment_id}")
    def get_comment(comment_id: str) -> dict:
        payload = comment_payload(state, comment_id)
        if payload is None:
            raise HTTPException(status_code=404, detail=f"unknown comment {comment_id}")
        return stamp(payload)

    @app.get("/reports/{kind}", response_class=PlainTextResponse)
    def get_report(kind: str) -> str:
        if kind not in ("its", "tenure", "importance"):
            raise HTTPException(status_code=404, detail=f"unknown report {kind!r}")
        if reports_dir is None:
            raise HTTPException(status_code=404, detail="no reports directory")
        path = reports_dir / f"{kind}_report.txt"
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"report {kind!r} not built yet")
        return path.read_text()

    if static_dir is not None:
        app.mount("/ui", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
