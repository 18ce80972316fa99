"""HTTP service: case submission, streamed diagnosis runs, refinement sessions.

The service is plumbing only — every model exchange in a stored trace comes
from a pipeline agent or tool, never from this layer. Stage events stream as
one JSON object per line; the terminal event carries the same result that
gets persisted, so stream and store never disagree.
"""

from __future__ import annotations

import json
import threading
import uuid
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .errors import ConfigError, ValidationError
from .model import DiagnosisResult, PatientCase, digest_of, validate_case
from .pipeline import Pipeline, PipelineConfig

MAX_CASE_BYTES = 5 * 1024 * 1024


class DocumentStore:
    """One JSON document per case, result, and session, under one root."""

    def __init__(self, root):
        self.root = Path(root)
        for sub in ("cases", "results", "sessions"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, kind: str, doc_id: str) -> Path:
        if not doc_id or "/" in doc_id or doc_id.startswith("."):
            raise ValidationError(f"bad document id {doc_id!r}")
        return self.root / kind / f"{doc_id}.json"

    def put(self, kind: str, doc_id: str, payload: dict):
        path = self._path(kind, doc_id)
        tmp = path.with_suffix(".tmp")
        with self._lock:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, ensure_ascii=False)
            tmp.replace(path)

    def get(self, kind: str, doc_id: str):
        path = self._path(kind, doc_id)
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)


def _event_line(payload: dict) -> str:
    return json.dumps(payload, ensure_ascii=False) + "\n"


def create_app(pipeline: Pipeline, store: DocumentStore, max_case_bytes: int = MAX_CASE_BYTES) -> FastAPI:
    app = FastAPI(title="cardioddx service")
    session_locks = {}
    locks_guard = threading.Lock()

    def lock_for(session_id: str) -> threading.Lock:
        with locks_guard:
            return session_locks.setdefault(session_id, threading.Lock())

    @app.post("/cases")
    async def submit_case(request: Request):
        body = await request.body()
        if len(body) > max_case_bytes:
            return JSONResponse({"error": "case payload too large"}, status_code=413)
        try:
            payload = json.loads(body)
        except json.JSONDecodeError as exc:
            return JSONResponse({"error": f"invalid JSON: {exc}"}, status_code=400)
        case_id = f"case-{uuid.uuid4().hex[:12]}"
        client_case_id = payload.get("case_id")
        payload["case_id"] = case_id
        try:
            case = PatientCase.from_json_dict(payload)
        except Exception as exc:
            return JSONResponse({"error": f"malformed case: {exc}"}, status_code=400)
        violations = validate_case(case)
        if violations:
            return JSONResponse(
                {"error": "case failed validation", "violations": [v.to_json_dict() for v in violations]},
                status_code=400,
            )
        doc = case.to_json_dict()
        if client_case_id:
            doc["client_case_id"] = client_case_id
        store.put("cases", case_id, doc)
        return JSONResponse({"case_id": case_id}, status_code=201)

    def load_case(case_id: str):
        doc = store.get("cases", case_id)
        if doc is None:
            return None
        doc = dict(doc)
        doc.pop("client_case_id", None)
        return PatientCase.from_json_dict(doc)

    @app.post("/cases/{case_id}/diagnose")
    async def diagnose(case_id: str, request: Request):
        case = load_case(case_id)
        if case is None:
            return JSONResponse({"error": f"unknown case {case_id!r}"}, status_code=404)
        body = await request.body()
        run_pipeline = pipeline
        if body.strip():
            try:
                overrides = json.loads(body)
                if overrides:
                    merged = dict(pipeline.config.to_json_dict())
                    merged.update(overrides)
                    run_pipeline = Pipeline(
                        pipeline.gateway,
                        pipeline.resources,
                        config=PipelineConfig.from_json_dict(merged),
                        clock_factory=pipeline.clock_factory,
                    )
            except (json.JSONDecodeError, ConfigError, TypeError) as exc:
                return JSONResponse({"error": f"bad configuration override: {exc}"}, status_code=400)

        def stream():
            for kind, payload in run_pipeline.iter_run(case):
                if kind == "stage":
                    yield _event_line({"event": "stage", "record": payload.to_json_dict()})
                elif kind == "result":
                    doc = payload.to_json_dict()
                    store.put("results", case_id, doc)
                    yield _event_line({"event": "result", "result": doc})
                else:
                    yield _event_line(
                        {
                            "event": "error",
                            "stage": payload["stage"],
                            "message": payload["message"],
                            "trace": [r.to_json_dict() for r in payload["trace"]],
                        }
                    )

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    @app.get("/cases/{case_id}/result")
    def get_result(case_id: str):
        doc = store.get("results", case_id)
        if doc is None:
            if store.get("cases", case_id) is None:
                return JSONResponse({"error": f"unknown case {case_id!r}"}, status_code=404)
            return JSONResponse({"error": f"no result stored for case {case_id!r}"}, status_code=404)
        return JSONResponse(doc)

    @app.post("/sessions")
    async def open_session(request: Request):
        try:
            payload = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            return JSONResponse({"error": f"invalid JSON: {exc}"}, status_code=400)
        case_id = payload.get("case_id")
        if not case_id:
            return JSONResponse({"error": "case_id required"}, status_code=400)
        if store.get("cases", case_id) is None:
            return JSONResponse({"error": f"unknown case {case_id!r}"}, status_code=404)
        if store.get("results", case_id) is None:
            return JSONResponse(
                {"error": f"case {case_id!r} has no stored result; run diagnosis first"}, status_code=409
            )
        session_id = f"session-{uuid.uuid4().hex[:12]}"
        doc = {"session_id": session_id, "case_id": case_id, "status": "open", "turns": []}
        store.put("sessions", session_id, doc)
        return JSONResponse(doc, status_code=201)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        doc = store.get("sessions", session_id)
        if doc is None:
            return JSONResponse({"error": f"unknown session {session_id!r}"}, status_code=404)
        return JSONResponse(doc)

    @app.post("/sessions/{session_id}/close")
    def close_session(session_id: str):
        doc = store.get("sessions", session_id)
        if doc is None:
            return JSONResponse({"error": f"unknown session {session_id!r}"}, status_code=404)
        doc["status"] = "closed"
        store.put("sessions", session_id, doc)
        return JSONResponse(doc)

    @app.post("/sessions/{session_id}/instruct")
    async def instruct(session_id: str, request: Request):
        doc = store.get("sessions", session_id)
        if doc is None:
            return JSONResponse({"error": f"unknown session {session_id!r}"}, status_code=404)
        if doc["status"] != "open":
            return JSONResponse({"error": "session is closed"}, status_code=409)
        try:
            payload = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            return JSONResponse({"error": f"invalid JSON: {exc}"}, status_code=400)
        instruction = str(payload.get("instruction", "")).strip()
        if not instruction:
            return JSONResponse({"error": "instruction must be non-empty"}, status_code=400)

        case = load_case(doc["case_id"])
        if case is None:
            return JSONResponse({"error": f"case {doc['case_id']!r} vanished"}, status_code=404)
        if doc["turns"]:
            prior_doc = doc["turns"][-1]["result"]
        else:
            prior_doc = store.get("results", doc["case_id"])
        prior = DiagnosisResult.from_json_dict(prior_doc)

        turn_lock = lock_for(session_id)
        if not turn_lock.acquire(blocking=False):
            return JSONResponse({"error": "a turn is already in flight for this session"}, status_code=409)

        def stream():
            try:
                for kind, event in pipeline.iter_refine(case, prior, instruction):
                    if kind == "stage":
                        yield _event_line({"event": "stage", "record": event.to_json_dict()})
                    elif kind == "result":
                        result_doc = event.to_json_dict()
                        current = store.get("sessions", session_id)
                        current["turns"].append(
                            {
                                "instruction": instruction,
                                "result": result_doc,
                                "result_digest": digest_of(result_doc),
                            }
                        )
                        store.put("sessions", session_id, current)
                        yield _event_line({"event": "result", "result": result_doc})
                    else:
                        yield _event_line(
                            {
                                "event": "error",
                                "stage": event["stage"],
                                "message": event["message"],
                                "trace": [r.to_json_dict() for r in event["trace"]],
                            }
                        )
            finally:
                turn_lock.release()

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    return app
