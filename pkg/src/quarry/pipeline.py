"""Run state machine: stage sequencing, HIL gating, and persistence.

A run advances one stage at a time through
Created -> Extracted -> Aligned -> Judged -> (AwaitingHumanFeedback ->
FeedbackApplied)* -> Completed, with Failed reachable from every
non-terminal state. The human-review loop is bounded by
max_feedback_rounds; without HIL the review states are unreachable.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import re
import struct
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

from . import agents
from .errors import (
    CorruptSnapshot,
    EmptyDocument,
    FeedbackTimeout,
    MissingProfile,
    QuarryError,
    StageError,
    UnknownFieldPath,
    VersionMismatch,
    WrongState,
)
from .gateway import Gateway, ModelRef
from .ingest import SourceDocument
from .memory import MemoryStore
from .ontology import OntologyStore
from .records import (
    AlignedSet,
    Correction,
    ExtractionDraft,
    FinalOutput,
    HumanFeedback,
    JudgedItem,
    JudgedSet,
    payload_from_dict,
    payload_to_dict,
)
from .taskspec import AGENT_ROLES, ExtractionTaskSpec

SNAPSHOT_MAGIC = b"SSRUN"
SNAPSHOT_VERSION = 1

# run states
CREATED = "created"
EXTRACTED = "extracted"
ALIGNED = "aligned"
JUDGED = "judged"
AWAITING_HUMAN_FEEDBACK = "awaiting_human_feedback"
FEEDBACK_APPLIED = "feedback_applied"
COMPLETED = "completed"
FAILED = "failed"

ALL_STATES = (
    CREATED,
    EXTRACTED,
    ALIGNED,
    JUDGED,
    AWAITING_HUMAN_FEEDBACK,
    FEEDBACK_APPLIED,
    COMPLETED,
    FAILED,
)
TERMINAL_STATES = {COMPLETED, FAILED}

TRANSITIONS: dict[str, set[str]] = {
    CREATED: {EXTRACTED, FAILED},
    EXTRACTED: {ALIGNED, FAILED},
    ALIGNED: {JUDGED, FAILED},
    JUDGED: {AWAITING_HUMAN_FEEDBACK, COMPLETED, FAILED},
    AWAITING_HUMAN_FEEDBACK: {FEEDBACK_APPLIED, FAILED},
    FEEDBACK_APPLIED: {COMPLETED, AWAITING_HUMAN_FEEDBACK, FAILED},
    COMPLETED: set(),
    FAILED: set(),
}

_CORRECTION_PATH = re.compile(r"records\[(\d+|\+)\](?:\.(\w+))?$")


@dataclass(frozen=True)
class AgentProfile:
    agent_role: str
    model: ModelRef
    temperature: float = 0.0
    max_output_tokens: int = 2048
    credential_ref: str | None = None

    def __post_init__(self):
        if self.agent_role not in AGENT_ROLES:
            raise ValueError(f"agent_role must be one of {AGENT_ROLES}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    def to_dict(self) -> dict:
        return {
            "agent_role": self.agent_role,
            "model": {
                "provider": self.model.provider,
                "model_name": self.model.model_name,
                "price_in": self.model.price_in,
                "price_out": self.model.price_out,
            },
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "credential_ref": self.credential_ref,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentProfile":
        m = d["model"]
        return cls(
            agent_role=d["agent_role"],
            model=ModelRef(m["provider"], m["model_name"], m.get("price_in", 0.0), m.get("price_out", 0.0)),
            temperature=d.get("temperature", 0.0),
            max_output_tokens=d.get("max_output_tokens", 2048),
            credential_ref=d.get("credential_ref"),
        )


@dataclass(frozen=True)
class RunOptions:
    hil_enabled: bool = False
    max_repair_attempts: int = 2
    max_feedback_rounds: int = 1
    alignment_top_k: int = 5
    hybrid_alpha: float = 0.5

    def __post_init__(self):
        if self.max_repair_attempts < 0:
            raise ValueError("max_repair_attempts must be >= 0")
        if self.hil_enabled and self.max_feedback_rounds < 1:
            raise ValueError("max_feedback_rounds must be >= 1 when hil_enabled")
        if self.alignment_top_k < 1:
            raise ValueError("alignment_top_k must be >= 1")
        if not 0.0 <= self.hybrid_alpha <= 1.0:
            raise ValueError("hybrid_alpha must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "hil_enabled": self.hil_enabled,
            "max_repair_attempts": self.max_repair_attempts,
            "max_feedback_rounds": self.max_feedback_rounds,
            "alignment_top_k": self.alignment_top_k,
            "hybrid_alpha": self.hybrid_alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunOptions":
        return cls(**d)


@dataclass
class Services:
    """Shared service handles a run advances against."""

    gateway: Gateway
    store: OntologyStore
    memory: MemoryStore
    embed_model: ModelRef | None = None
    run_store: object | None = None  # optional durable sink with .save(run)

    def embedder(self):
        model = self.embed_model or ModelRef("scripted", "hash-embedder")
        return self.gateway.embedder(model)


@dataclass
class PipelineRun:
    run_id: str
    spec: ExtractionTaskSpec
    doc: SourceDocument
    profiles: dict[str, AgentProfile]
    options: RunOptions
    state: str = CREATED
    payload: object = None
    history: list[str] = field(default_factory=lambda: [CREATED])
    rounds_used: int = 0
    hil_applied: bool = False
    pending_feedback: HumanFeedback | None = None
    failure_cause: str | None = None
    usage_ledger_ref: str = "default"
    memory_scope_ref: str = ""
    created_at: str = ""
    updated_at: str = ""

    @property
    def document_ref(self) -> str:
        return self.doc.doc_id

    def is_terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "spec": self.spec.to_dict(),
            "doc": self.doc.to_dict(),
            "profiles": {role: p.to_dict() for role, p in sorted(self.profiles.items())},
            "options": self.options.to_dict(),
            "state": self.state,
            "payload": payload_to_dict(self.payload),
            "history": list(self.history),
            "rounds_used": self.rounds_used,
            "hil_applied": self.hil_applied,
            "pending_feedback": self.pending_feedback.to_dict() if self.pending_feedback else None,
            "failure_cause": self.failure_cause,
            "usage_ledger_ref": self.usage_ledger_ref,
            "memory_scope_ref": self.memory_scope_ref,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineRun":
        return cls(
            run_id=d["run_id"],
            spec=ExtractionTaskSpec.from_dict(d["spec"]),
            doc=SourceDocument.from_dict(d["doc"]),
            profiles={role: AgentProfile.from_dict(p) for role, p in d["profiles"].items()},
            options=RunOptions.from_dict(d["options"]),
            state=d["state"],
            payload=payload_from_dict(d.get("payload")),
            history=list(d.get("history", [d["state"]])),
            rounds_used=d.get("rounds_used", 0),
            hil_applied=d.get("hil_applied", False),
            pending_feedback=HumanFeedback.from_dict(d["pending_feedback"]) if d.get("pending_feedback") else None,
            failure_cause=d.get("failure_cause"),
            usage_ledger_ref=d.get("usage_ledger_ref", "default"),
            memory_scope_ref=d.get("memory_scope_ref", ""),
            created_at=d.get("created_at", ""),
            updated_at=d.get("updated_at", ""),
        )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def derive_run_id(spec: ExtractionTaskSpec, doc: SourceDocument, options: RunOptions) -> str:
    """Deterministic run id so identical inputs yield identical outputs."""
    payload = json.dumps([spec.to_dict(), doc.doc_id, options.to_dict()], sort_keys=True)
    return f"{spec.task_id}-{hashlib.sha256(payload.encode()).hexdigest()[:12]}"


def start_run(
    spec: ExtractionTaskSpec,
    doc: SourceDocument,
    profiles: dict[str, AgentProfile],
    options: RunOptions,
    run_id: str | None = None,
) -> PipelineRun:
    """Create a run in state Created with an empty payload."""
    for role in AGENT_ROLES:
        if role not in profiles:
            raise MissingProfile(role)
    if not doc.sections:
        raise EmptyDocument(f"document {doc.doc_id} has no sections")
    rid = run_id or derive_run_id(spec, doc, options)
    now = _now()
    return PipelineRun(
        run_id=rid,
        spec=spec,
        doc=doc,
        profiles=dict(profiles),
        options=options,
        memory_scope_ref=f"mem:{rid}",
        created_at=now,
        updated_at=now,
    )


def _transition(run: PipelineRun, new_state: str, services: Services | None = None) -> None:
    if new_state not in TRANSITIONS[run.state]:
        raise WrongState(run.state, new_state)
    run.state = new_state
    run.history.append(new_state)
    run.updated_at = _now()
    if new_state == AWAITING_HUMAN_FEEDBACK:
        run.rounds_used += 1
    if services is not None and services.run_store is not None:
        services.run_store.save(run)


def _fail(run: PipelineRun, services: Services, cause: str) -> None:
    run.failure_cause = cause
    _transition(run, FAILED, services)


def advance(run: PipelineRun, services: Services) -> PipelineRun:
    """Execute exactly one stage and move the run one state forward."""
    if run.is_terminal():
        raise WrongState(run.state, "a non-terminal state")
    if run.state == AWAITING_HUMAN_FEEDBACK:
        raise WrongState(run.state, "apply_human_feedback, not advance")

    services.memory.register_run(run.run_id)
    memory = services.memory.scope(run.run_id)
    opts = run.options

    try:
        if run.state == CREATED:
            items = agents.run_extractor(
                services.gateway, memory, run.spec, run.doc, run.profiles["extractor"], opts
            )
            run.payload = ExtractionDraft(items=tuple(items))
            _transition(run, EXTRACTED, services)

        elif run.state == EXTRACTED:
            aligned = agents.run_alignment(
                services.gateway,
                services.store,
                memory,
                list(run.payload.items),
                opts.alignment_top_k,
                opts.hybrid_alpha,
                services.embedder(),
                run.profiles["alignment"],
                opts,
                run.spec,
            )
            run.payload = AlignedSet(items=tuple(aligned))
            _transition(run, ALIGNED, services)

        elif run.state == ALIGNED:
            judged = agents.run_judge(
                services.gateway, memory, list(run.payload.items), run.profiles["judge"], opts, run.spec
            )
            run.payload = JudgedSet(items=tuple(judged))
            _transition(run, JUDGED, services)

        elif run.state == JUDGED:
            if opts.hil_enabled:
                # gate only; payload untouched until the human responds
                _transition(run, AWAITING_HUMAN_FEEDBACK, services)
            else:
                _finalize(run, services, memory, human=None)

        elif run.state == FEEDBACK_APPLIED:
            human = run.pending_feedback
            another_round = human is not None and not human.approve
            if another_round and run.rounds_used < opts.max_feedback_rounds:
                output = _run_feedback_agent(run, services, memory, human)
                judged = agents.run_judge(
                    services.gateway,
                    memory,
                    [r.base for r in output.records],
                    run.profiles["judge"],
                    opts,
                    run.spec,
                )
                run.payload = JudgedSet(items=tuple(judged))
                run.pending_feedback = None
                _transition(run, AWAITING_HUMAN_FEEDBACK, services)
            else:
                _finalize(run, services, memory, human=human)
    except (QuarryError, ValueError) as e:
        stage = e.role if isinstance(e, StageError) else _stage_for_state(run.state)
        wrapped = e if isinstance(e, StageError) else StageError(stage, str(e))
        _fail(run, services, str(wrapped))
        raise wrapped from e

    return run


def _stage_for_state(state: str) -> str:
    return {
        CREATED: "extractor",
        EXTRACTED: "alignment",
        ALIGNED: "judge",
        JUDGED: "feedback",
        FEEDBACK_APPLIED: "feedback",
    }.get(state, state)


def _run_feedback_agent(run: PipelineRun, services: Services, memory, human) -> FinalOutput:
    return agents.run_feedback(
        services.gateway,
        memory,
        list(run.payload.items),
        human,
        run.profiles["feedback"],
        run.options,
        run.spec,
        run_id=run.run_id,
        doc_id=run.doc.doc_id,
        hil_applied=run.hil_applied,
        section_ids=set(run.doc.section_ids()),
    )


def _finalize(run: PipelineRun, services: Services, memory, human) -> None:
    output = _run_feedback_agent(run, services, memory, human)
    run.payload = output
    run.pending_feedback = None
    _transition(run, COMPLETED, services)


def apply_human_feedback(run: PipelineRun, feedback: HumanFeedback, services: Services | None = None) -> PipelineRun:
    """Merge reviewer corrections into the payload and record the guidance.

    Field corrections are written into the judged payload immediately (and
    re-enforced after the feedback agent runs); new-record corrections are
    appended and their paths rewritten to the appended index.
    """
    if run.state != AWAITING_HUMAN_FEEDBACK:
        raise WrongState(run.state, AWAITING_HUMAN_FEEDBACK)

    doc_sections = set(run.doc.section_ids())
    items = list(run.payload.items)
    resolved: list[Correction] = []
    for corr in feedback.corrections:
        m = _CORRECTION_PATH.fullmatch(corr.path)
        if not m:
            raise UnknownFieldPath(corr.path)
        idx_token, fname = m.group(1), m.group(2)
        if idx_token == "+":
            if fname is not None:
                raise UnknownFieldPath(corr.path)
            item = _record_from_patch(corr.value, len(items))
            if item.base.base.section_id not in doc_sections:
                raise UnknownFieldPath(f"records[+].section_id: no section {item.base.base.section_id!r} in document")
            items.append(item)
            resolved.append(Correction(path=f"records[{len(items) - 1}]", value=item.to_dict()))
            continue
        idx = int(idx_token)
        if idx >= len(items):
            raise UnknownFieldPath(corr.path)
        if fname is None:
            raise UnknownFieldPath(corr.path)
        if fname == "section_id" and corr.value not in doc_sections:
            raise UnknownFieldPath(f"{corr.path}: no section {corr.value!r} in document")
        items[idx] = agents.apply_field_values(items[idx], {fname: corr.value})
        resolved.append(corr)

    run.payload = JudgedSet(items=tuple(items))
    run.pending_feedback = HumanFeedback(
        corrections=tuple(resolved), guidance=feedback.guidance, approve=feedback.approve
    )
    run.hil_applied = True
    _transition(run, FEEDBACK_APPLIED, services)
    return run


def _record_from_patch(value, position: int) -> JudgedItem:
    """Build a reviewer-added record from a new-record patch."""
    if not isinstance(value, dict):
        raise UnknownFieldPath("records[+] requires a record object value")
    d = dict(value)
    d.setdefault("item_id", f"h{position:03d}")
    d.setdefault("judge_score", 1.0)
    d.setdefault("judge_rationale", "added by reviewer")
    d.setdefault("candidates", [d["chosen"]] if d.get("chosen") else [])
    try:
        return JudgedItem.from_dict(d)
    except (KeyError, ValueError, TypeError) as e:
        raise UnknownFieldPath(f"records[+]: invalid record patch ({e})") from e


def run_to_completion(
    run: PipelineRun,
    services: Services,
    feedback_source=None,
    feedback_timeout: float | None = None,
) -> FinalOutput:
    """Drive a freshly created run to Completed.

    With HIL enabled the run blocks on feedback_source(run) at every
    AwaitingHumanFeedback entry; without HIL the source is never invoked.
    """
    if run.state != CREATED:
        raise WrongState(run.state, CREATED)
    while not run.is_terminal():
        if run.state == AWAITING_HUMAN_FEEDBACK:
            if feedback_source is None:
                raise StageError("feedback", "run paused for review but no feedback source was provided")
            feedback = _await_feedback(run, services, feedback_source, feedback_timeout)
            apply_human_feedback(run, feedback, services)
        else:
            advance(run, services)
    if run.state == FAILED:
        raise StageError("pipeline", run.failure_cause or "run failed")
    return run.payload


def _await_feedback(run, services, feedback_source, timeout) -> HumanFeedback:
    if timeout is None:
        return feedback_source(run)
    # The timeout bounds our wait; a non-cooperative source should still
    # enforce its own deadline since its thread cannot be interrupted.
    pool = concurrent.futures.ThreadPoolExecutor(max_workers=1)
    try:
        future = pool.submit(feedback_source, run)
        try:
            return future.result(timeout=timeout)
        except concurrent.futures.TimeoutError:
            future.cancel()
            _fail(run, services, f"no human feedback within {timeout}s")
            raise FeedbackTimeout(f"no human feedback within {timeout}s") from None
    finally:
        pool.shutdown(wait=False, cancel_futures=True)


# --- snapshots ---------------------------------------------------------------

def snapshot(run: PipelineRun) -> bytes:
    """Serialize a run to the versioned SSRUN format."""
    blob = json.dumps(run.to_dict(), sort_keys=True, ensure_ascii=False).encode("utf-8")
    return SNAPSHOT_MAGIC + struct.pack(">I", SNAPSHOT_VERSION) + blob


def restore(data: bytes) -> PipelineRun:
    if len(data) < len(SNAPSHOT_MAGIC) + 4 or not data.startswith(SNAPSHOT_MAGIC):
        raise CorruptSnapshot("not a run snapshot")
    (version,) = struct.unpack(">I", data[len(SNAPSHOT_MAGIC) : len(SNAPSHOT_MAGIC) + 4])
    if version != SNAPSHOT_VERSION:
        raise VersionMismatch(version, SNAPSHOT_VERSION)
    try:
        payload = json.loads(data[len(SNAPSHOT_MAGIC) + 4 :])
        return PipelineRun.from_dict(payload)
    except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
        raise CorruptSnapshot(f"unreadable snapshot payload: {e}") from e


class RunStore:
    """Directory of run snapshots; every transition is durably recorded."""

    def __init__(self, root):
        from pathlib import Path

        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def save(self, run: PipelineRun) -> None:
        path = self.root / f"{run.run_id}.ssrun"
        tmp = path.with_suffix(".ssrun.tmp")
        tmp.write_bytes(snapshot(run))
        tmp.replace(path)

    def load(self, run_id: str) -> PipelineRun:
        return restore((self.root / f"{run_id}.ssrun").read_bytes())

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.ssrun"))
