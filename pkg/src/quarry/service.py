"""HTTP service: pipeline runs plus human-review sessions.

Wraps the core engine behind a FastAPI app. Runs submitted over HTTP advance
on a worker pool; when a run pauses for review a session opens, reviewers
work through the /sessions endpoints, and submission feeds HumanFeedback
back into the paused run. Session payloads mirror the ReviewSession /
ReviewItem field names exactly.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor

from fastapi import Depends, FastAPI, HTTPException, Query, Request, Response
from pydantic import BaseModel, Field

from . import __version__
from .errors import (
    IncompleteReview,
    QuarryError,
    SessionClosed,
    SessionExists,
    SessionOpen,
    UnknownFieldPath,
    UnknownItem,
    WrongState,
)
from .ingest import parse_structured_article
from .pipeline import (
    AWAITING_HUMAN_FEEDBACK,
    PipelineRun,
    RunOptions,
    Services,
    run_to_completion,
    start_run,
)
from .records import HumanFeedback
from .review import Decision, SessionStore
from .runtime import profiles_from_config
from .taskspec import load_task_spec

logger = logging.getLogger(__name__)

DEFAULT_SESSION_WAIT = 600.0  # seconds a paused run waits for review


class ServiceState:
    """Shared mutable state behind the app: engine, runs, sessions."""

    def __init__(
        self,
        services: Services,
        default_profiles: dict | None = None,
        poll_interval: float = 0.05,
        session_wait: float = DEFAULT_SESSION_WAIT,
        auth_token: str | None = None,
    ):
        self.services = services
        self.default_profiles = default_profiles
        self.sessions = SessionStore()
        self.runs: dict[str, PipelineRun] = {}
        self.run_errors: dict[str, str] = {}
        self.poll_interval = poll_interval
        self.session_wait = session_wait
        self.auth_token = auth_token
        self.executor = ThreadPoolExecutor(max_workers=8, thread_name_prefix="quarry-run")
        self.lock = threading.Lock()
        self.stopping = threading.Event()

    def shutdown(self) -> None:
        """Unblock review pollers and drain the worker pool."""
        self.stopping.set()
        self.executor.shutdown(wait=True, cancel_futures=True)

    def register(self, run: PipelineRun) -> None:
        with self.lock:
            if run.run_id in self.runs:
                raise SessionExists(run.run_id)  # mapped to 409
            self.runs[run.run_id] = run

    def get_run(self, run_id: str) -> PipelineRun:
        with self.lock:
            run = self.runs.get(run_id)
        if run is None:
            raise UnknownItem(run_id)
        return run

    def launch(self, run: PipelineRun) -> None:
        self.register(run)
        self.executor.submit(self._drive, run)

    def _drive(self, run: PipelineRun) -> None:
        try:
            run_to_completion(run, self.services, feedback_source=self._session_feedback_source())
        except QuarryError as e:
            logger.warning("run %s failed: %s", run.run_id, e)
            with self.lock:
                self.run_errors[run.run_id] = str(e)
        except Exception:
            logger.exception("run %s crashed", run.run_id)
            with self.lock:
                self.run_errors[run.run_id] = "internal error"

    def _session_feedback_source(self):
        def source(run: PipelineRun) -> HumanFeedback:
            session = self.sessions.open_for_run(run.run_id)
            if session is None:
                session = self.sessions.open_session(run)
            deadline = time.monotonic() + self.session_wait
            while True:
                feedback = self.sessions.take_feedback(session.session_id)
                if feedback is not None:
                    return feedback
                if self.stopping.is_set():
                    raise QuarryError("service shutting down before review completed")
                if time.monotonic() > deadline:
                    # fall back to autonomous completion, as if approved
                    self.sessions.expire(session.session_id)
                    logger.warning("session %s expired; completing run %s autonomously", session.session_id, run.run_id)
                    return HumanFeedback(approve=True)
                time.sleep(self.poll_interval)

        return source


# --- wire models ---------------------------------------------------------------

class RunCreateRequest(BaseModel):
    task: dict
    document: dict
    options: dict = Field(default_factory=dict)
    profiles: dict | None = None
    run_id: str | None = None


class RunStatus(BaseModel):
    run_id: str
    state: str
    hil_applied: bool
    judge_summary: float | None = None
    failure_cause: str | None = None
    session_id: str | None = None
    error: str | None = None


class DecisionIn(BaseModel):
    item_id: str | None = None
    verdict: str
    corrected_value: dict | None = None
    note: str | None = None


class DecisionsRequest(BaseModel):
    decisions: list[DecisionIn]


class SubmitRequest(BaseModel):
    guidance: str | None = None
    approve_remainder: bool = False
    request_another_round: bool = False


class ReviewItemOut(BaseModel):
    item_id: str
    label: str
    entity_type: str
    chosen: dict | None
    judge_score: float | None
    source_sentence: str
    section_id: str
    value: str | None
    verdict: str
    corrected_value: dict | None
    note: str | None
    added_by_reviewer: bool


class SessionSummary(BaseModel):
    session_id: str
    run_id: str
    task_id: str
    model_name: str
    status: str
    opened_at: str
    item_count: int
    judge_mean: float | None


class SessionDetail(SessionSummary):
    items: list[ReviewItemOut]
    guidance: str | None = None


class SubmitResponse(BaseModel):
    session_id: str
    run_id: str
    run_state: str


def _summary(session) -> SessionSummary:
    scores = [i.judge_score for i in session.items if i.judge_score is not None]
    return SessionSummary(
        session_id=session.session_id,
        run_id=session.run_id,
        task_id=session.task_id,
        model_name=session.model_name,
        status=session.status,
        opened_at=session.opened_at,
        item_count=len(session.items),
        judge_mean=sum(scores) / len(scores) if scores else None,
    )


def _detail(session) -> SessionDetail:
    base = _summary(session).model_dump()
    return SessionDetail(
        **base,
        items=[ReviewItemOut(**i.to_dict()) for i in session.items],
        guidance=session.guidance,
    )


_STATUS_FOR = [
    ((UnknownItem,), 404),
    ((WrongState, SessionExists, SessionClosed, SessionOpen, IncompleteReview), 409),
    ((UnknownFieldPath,), 400),
]


def _http_error(e: QuarryError) -> HTTPException:
    for classes, status in _STATUS_FOR:
        if isinstance(e, classes):
            return HTTPException(status_code=status, detail=str(e))
    return HTTPException(status_code=400, detail=str(e))


def create_app(state: ServiceState) -> FastAPI:
    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        state.shutdown()

    app = FastAPI(title="quarry", version=__version__, lifespan=lifespan)
    app.state.engine = state

    def auth(request: Request) -> None:
        if state.auth_token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {state.auth_token}":
            raise HTTPException(status_code=401, detail="missing or invalid token")

    @app.exception_handler(QuarryError)
    async def quarry_error_handler(request: Request, exc: QuarryError):
        http = _http_error(exc)
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=http.status_code, content={"detail": http.detail})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    # -- runs --------------------------------------------------------------

    @app.post("/runs", response_model=RunStatus, status_code=201, dependencies=[Depends(auth)])
    def create_run(body: RunCreateRequest):
        spec = load_task_spec(json.dumps(body.task))
        doc = parse_structured_article(json.dumps(body.document))
        if body.profiles is not None:
            profiles = profiles_from_config(body.profiles)
        elif state.default_profiles is not None:
            profiles = profiles_from_config(state.default_profiles)
        else:
            raise HTTPException(status_code=400, detail="no profiles in request and no service default")
        try:
            options = RunOptions(**body.options)
        except (TypeError, ValueError) as e:
            raise HTTPException(status_code=422, detail=f"bad options: {e}") from e
        run = start_run(spec, doc, profiles, options, run_id=body.run_id)
        state.launch(run)
        return _run_status(run)

    @app.get("/runs", dependencies=[Depends(auth)])
    def list_runs():
        with state.lock:
            runs = list(state.runs.values())
        return {"runs": [_run_status(r).model_dump() for r in runs]}

    @app.get("/runs/{run_id}", response_model=RunStatus, dependencies=[Depends(auth)])
    def get_run(run_id: str):
        return _run_status(state.get_run(run_id))

    @app.get("/runs/{run_id}/output", dependencies=[Depends(auth)])
    def get_run_output(run_id: str):
        run = state.get_run(run_id)
        if run.state != "completed":
            raise HTTPException(status_code=409, detail=f"run is {run.state}, not completed")
        return Response(content=run.payload.to_bytes(), media_type="application/json")

    def _run_status(run: PipelineRun) -> RunStatus:
        session = state.sessions.open_for_run(run.run_id)
        judge_summary = None
        if run.state == "completed":
            judge_summary = run.payload.judge_summary
        return RunStatus(
            run_id=run.run_id,
            state=run.state,
            hil_applied=run.hil_applied,
            judge_summary=judge_summary,
            failure_cause=run.failure_cause,
            session_id=session.session_id if session else None,
            error=state.run_errors.get(run.run_id),
        )

    # -- sessions ----------------------------------------------------------

    @app.get("/sessions", dependencies=[Depends(auth)])
    def list_sessions(status: str | None = Query(default=None)):
        sessions = state.sessions.list_sessions(status=status)
        return {"sessions": [_summary(s).model_dump() for s in sessions]}

    @app.get("/sessions/{session_id}", response_model=SessionDetail, dependencies=[Depends(auth)])
    def get_session(session_id: str):
        return _detail(state.sessions.get(session_id))

    @app.post("/sessions/{session_id}/decisions", dependencies=[Depends(auth)])
    def post_decisions(session_id: str, body: DecisionsRequest):
        try:
            decisions = [
                Decision(d.item_id, d.verdict, corrected_value=d.corrected_value, note=d.note)
                for d in body.decisions
            ]
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e)) from e
        session = state.sessions.record_decisions(session_id, decisions)
        reviewed = sum(i.verdict != "unreviewed" for i in session.items)
        return {"session_id": session_id, "status": session.status, "reviewed": reviewed, "total": len(session.items)}

    @app.post("/sessions/{session_id}/submit", response_model=SubmitResponse, dependencies=[Depends(auth)])
    def submit_session(session_id: str, body: SubmitRequest):
        session = state.sessions.get(session_id)
        state.sessions.submit(
            session_id,
            guidance=body.guidance,
            approve_remainder=body.approve_remainder,
            request_another_round=body.request_another_round,
        )
        run_state = _wait_for_resume(session.run_id)
        return SubmitResponse(session_id=session_id, run_id=session.run_id, run_state=run_state)

    def _wait_for_resume(run_id: str, wait: float = 10.0) -> str:
        """Give the engine thread a moment to consume the feedback."""
        try:
            run = state.get_run(run_id)
        except UnknownItem:
            return "unknown"
        deadline = time.monotonic() + wait
        while time.monotonic() < deadline:
            if run.state != AWAITING_HUMAN_FEEDBACK or state.sessions.open_for_run(run_id):
                break
            time.sleep(state.poll_interval)
        return run.state

    @app.get("/sessions/{session_id}/export", dependencies=[Depends(auth)])
    def export_session(session_id: str):
        data = state.sessions.export_review_file(session_id)
        return Response(
            content=data,
            media_type="text/csv",
            headers={"Content-Disposition": f'attachment; filename="review-{session_id}.csv"'},
        )

    return app


def mount_ui(app: FastAPI, dist_dir) -> None:
    """Serve the review console's static build, when present."""
    from pathlib import Path

    from fastapi.staticfiles import StaticFiles

    dist = Path(dist_dir)
    if dist.is_dir():
        app.mount("/ui", StaticFiles(directory=str(dist), html=True), name="ui")
    else:
        logger.warning("UI dist directory %s not found; /ui not mounted", dist)
