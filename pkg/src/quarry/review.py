"""Human review sessions over paused runs.

A session mirrors a run's judged items one-to-one. Reviewers mark each item
correct / incorrect / missing, attach structured patches, and submit once;
submission translates verdicts into HumanFeedback for the pipeline and the
session becomes the source of the exported review file that the metrics
layer consumes.
"""

from __future__ import annotations

import csv
import io
import json
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .errors import (
    IncompleteReview,
    SessionClosed,
    SessionExists,
    SessionOpen,
    UnknownItem,
    WrongState,
)
from .pipeline import AWAITING_HUMAN_FEEDBACK, PipelineRun
from .records import Correction, HumanFeedback

VERDICTS = ("correct", "incorrect", "missing", "unreviewed")

OPEN = "open"
SUBMITTED = "submitted"
EXPIRED = "expired"


@dataclass
class ReviewItem:
    item_id: str
    label: str
    entity_type: str
    chosen: dict | None
    judge_score: float | None
    source_sentence: str
    section_id: str
    value: str | None = None
    verdict: str = "unreviewed"
    corrected_value: dict | None = None
    note: str | None = None
    added_by_reviewer: bool = False

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "label": self.label,
            "entity_type": self.entity_type,
            "chosen": self.chosen,
            "judge_score": self.judge_score,
            "source_sentence": self.source_sentence,
            "section_id": self.section_id,
            "value": self.value,
            "verdict": self.verdict,
            "corrected_value": self.corrected_value,
            "note": self.note,
            "added_by_reviewer": self.added_by_reviewer,
        }


@dataclass
class ReviewSession:
    session_id: str
    run_id: str
    task_id: str
    model_name: str
    items: list[ReviewItem]
    status: str = OPEN
    opened_at: str = ""
    deadline: str | None = None
    guidance: str | None = None

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "run_id": self.run_id,
            "task_id": self.task_id,
            "model_name": self.model_name,
            "items": [i.to_dict() for i in self.items],
            "status": self.status,
            "opened_at": self.opened_at,
            "deadline": self.deadline,
            "guidance": self.guidance,
        }


@dataclass(frozen=True)
class Decision:
    """One reviewer decision: an existing item's verdict or a new row."""

    item_id: str | None
    verdict: str
    corrected_value: dict | None = None
    note: str | None = None

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")
        if self.verdict == "incorrect" and self.corrected_value is None and not (self.note or "").strip():
            raise ValueError("incorrect verdicts need a corrected_value or an explanatory note")
        if self.item_id is None and self.verdict != "missing":
            raise ValueError("new rows must carry verdict=missing")
        if self.item_id is None and not isinstance(self.corrected_value, dict):
            raise ValueError("new rows need a corrected_value record object")


class SessionStore:
    """In-memory session registry; one open session per run, submit-once."""

    def __init__(self):
        self._lock = threading.RLock()
        self._sessions: dict[str, ReviewSession] = {}
        self._feedback: dict[str, HumanFeedback] = {}
        self._consumed: set[str] = set()

    # -- lifecycle -------------------------------------------------------------

    def open_session(self, run: PipelineRun, deadline: str | None = None) -> ReviewSession:
        if run.state != AWAITING_HUMAN_FEEDBACK:
            raise WrongState(run.state, AWAITING_HUMAN_FEEDBACK)
        with self._lock:
            for s in self._sessions.values():
                if s.run_id == run.run_id and s.status == OPEN:
                    raise SessionExists(run.run_id)
            session = ReviewSession(
                session_id=uuid.uuid4().hex[:12],
                run_id=run.run_id,
                task_id=run.spec.task_id,
                model_name=run.profiles["extractor"].model.model_name,
                items=[_mirror_item(j) for j in run.payload.items],
                status=OPEN,
                opened_at=datetime.now(timezone.utc).isoformat(),
                deadline=deadline,
            )
            self._sessions[session.session_id] = session
            return session

    def open_for_run(self, run_id: str) -> ReviewSession | None:
        with self._lock:
            for s in self._sessions.values():
                if s.run_id == run_id and s.status == OPEN:
                    return s
        return None

    def get(self, session_id: str) -> ReviewSession:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise UnknownItem(session_id)
            return session

    def list_sessions(self, status: str | None = None) -> list[ReviewSession]:
        with self._lock:
            sessions = sorted(self._sessions.values(), key=lambda s: s.opened_at)
            if status is not None:
                sessions = [s for s in sessions if s.status == status]
            return sessions

    # -- review ----------------------------------------------------------------

    def record_decisions(self, session_id: str, decisions: list[Decision]) -> ReviewSession:
        """Apply decisions to the session draft; callable repeatedly while open."""
        with self._lock:
            session = self.get(session_id)
            if session.status != OPEN:
                raise SessionClosed(f"session {session_id} is {session.status}")
            by_id = {i.item_id: i for i in session.items}
            for d in decisions:
                if d.item_id is None:
                    row = dict(d.corrected_value)
                    item = ReviewItem(
                        item_id=row.get("item_id") or f"new-{len(session.items):03d}",
                        label=str(row.get("label", "")),
                        entity_type=str(row.get("entity_type", "")),
                        chosen=row.get("chosen"),
                        judge_score=None,
                        source_sentence=str(row.get("source_sentence", "")),
                        section_id=str(row.get("section_id", "")),
                        verdict="missing",
                        corrected_value=row,
                        note=d.note,
                        added_by_reviewer=True,
                    )
                    session.items.append(item)
                    by_id[item.item_id] = item
                    continue
                item = by_id.get(d.item_id)
                if item is None:
                    raise UnknownItem(d.item_id)
                item.verdict = d.verdict
                item.corrected_value = d.corrected_value
                item.note = d.note
            return session

    def submit(
        self,
        session_id: str,
        guidance: str | None = None,
        approve_remainder: bool = False,
        request_another_round: bool = False,
    ) -> HumanFeedback:
        """Close the session and translate its verdicts into HumanFeedback."""
        with self._lock:
            session = self.get(session_id)
            if session.status != OPEN:
                raise SessionClosed(f"session {session_id} is {session.status}")
            unreviewed = [i for i in session.items if i.verdict == "unreviewed"]
            if unreviewed and not approve_remainder:
                raise IncompleteReview(len(unreviewed))
            for item in unreviewed:
                item.verdict = "correct"
            feedback = _decisions_to_feedback(session, guidance, request_another_round)
            session.status = SUBMITTED
            session.guidance = guidance
            self._feedback[session_id] = feedback
            return feedback

    def expire(self, session_id: str) -> None:
        with self._lock:
            session = self.get(session_id)
            if session.status == OPEN:
                session.status = EXPIRED

    def take_feedback(self, session_id: str) -> HumanFeedback | None:
        """Hand the submitted feedback to the pipeline exactly once."""
        with self._lock:
            if session_id in self._consumed:
                return None
            feedback = self._feedback.get(session_id)
            if feedback is not None:
                self._consumed.add(session_id)
            return feedback

    # -- export ----------------------------------------------------------------

    def export_review_file(self, session_id: str) -> bytes:
        """Emit the review-file format consumed by the metrics layer."""
        session = self.get(session_id)
        if session.status == OPEN:
            raise SessionOpen(f"session {session_id} is still open")
        return render_review_file(session)


def _mirror_item(judged) -> ReviewItem:
    d = judged.to_dict()
    return ReviewItem(
        item_id=d["item_id"],
        label=d["label"],
        entity_type=d["entity_type"],
        chosen=d.get("chosen"),
        judge_score=d.get("judge_score"),
        source_sentence=d.get("source_sentence", ""),
        section_id=d.get("section_id", ""),
        value=d.get("value"),
    )


def _decisions_to_feedback(session: ReviewSession, guidance, request_another_round: bool) -> HumanFeedback:
    corrections: list[Correction] = []
    # positions refer to the run payload, which excludes reviewer-added rows
    position = 0
    for item in session.items:
        if item.added_by_reviewer:
            record = dict(item.corrected_value or {})
            record.setdefault("label", item.label)
            record.setdefault("entity_type", item.entity_type)
            record.setdefault("section_id", item.section_id)
            record.setdefault("source_sentence", item.source_sentence)
            corrections.append(Correction(path="records[+]", value=record))
            continue
        if item.verdict == "incorrect" and item.corrected_value:
            for fname, value in sorted(item.corrected_value.items()):
                corrections.append(Correction(path=f"records[{position}].{fname}", value=value))
        position += 1
    approve = not request_another_round
    if not approve and not corrections and not (guidance or "").strip():
        # nothing actionable to iterate on; treat as approval
        approve = True
    return HumanFeedback(corrections=tuple(corrections), guidance=guidance, approve=approve)


# --- review-file format --------------------------------------------------------

def render_review_file(session: ReviewSession) -> bytes:
    """Header row (task_id, run_id, model_name), then one row per field."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow([session.task_id, session.run_id, session.model_name])
    position = 0
    for item in session.items:
        if item.added_by_reviewer:
            path = "records[+]"
            original = ""
        else:
            path = f"records[{position}]"
            original = json.dumps(_original_value(item), sort_keys=True, ensure_ascii=False)
            position += 1
        writer.writerow(
            [
                path,
                original,
                item.verdict,
                json.dumps(item.corrected_value, sort_keys=True, ensure_ascii=False) if item.corrected_value else "",
                "" if item.judge_score is None else repr(item.judge_score),
            ]
        )
    return buf.getvalue().encode("utf-8")


def _original_value(item: ReviewItem) -> dict:
    return {
        "label": item.label,
        "entity_type": item.entity_type,
        "value": item.value,
        "chosen": (item.chosen or {}).get("curie") if item.chosen else None,
    }
