"""The record-set family: the pipeline's evolving structured payload.

ExtractionDraft -> AlignedSet -> JudgedSet -> FinalOutput, where each item
keeps its provenance (source sentence, section id), concept candidates and
the judge's confidence. Everything round-trips through plain dicts so run
snapshots and wire payloads share one representation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .ingest import normalize_whitespace


@dataclass(frozen=True)
class ConceptRef:
    """A scored reference to a stored ontology term (identity fields only)."""

    curie: str
    iri: str
    label: str
    ontology_name: str
    fused_score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.fused_score <= 1.0:
            raise ValueError("fused_score must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "curie": self.curie,
            "iri": self.iri,
            "label": self.label,
            "ontology_name": self.ontology_name,
            "fused_score": self.fused_score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptRef":
        return cls(
            curie=d["curie"],
            iri=d.get("iri", ""),
            label=d.get("label", ""),
            ontology_name=d.get("ontology_name", ""),
            fused_score=float(d.get("fused_score", 1.0)),
        )


@dataclass(frozen=True)
class ExtractedItem:
    item_id: str
    label: str
    entity_type: str
    source_sentence: str
    section_id: str
    value: str | None = None
    extras: dict = field(default_factory=dict)
    non_literal: bool = False

    def __post_init__(self):
        if not self.label:
            raise ValueError("label must be non-empty")

    def label_in_sentence(self) -> bool:
        return normalize_whitespace(self.label).lower() in normalize_whitespace(self.source_sentence).lower()

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "label": self.label,
            "entity_type": self.entity_type,
            "value": self.value,
            "source_sentence": self.source_sentence,
            "section_id": self.section_id,
            "extras": dict(self.extras),
            "non_literal": self.non_literal,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractedItem":
        return cls(
            item_id=d["item_id"],
            label=d["label"],
            entity_type=d.get("entity_type", ""),
            value=d.get("value"),
            source_sentence=d.get("source_sentence", ""),
            section_id=d.get("section_id", ""),
            extras=dict(d.get("extras", {})),
            non_literal=bool(d.get("non_literal", False)),
        )


@dataclass(frozen=True)
class AlignedItem:
    base: ExtractedItem
    candidates: tuple[ConceptRef, ...] = ()
    chosen: ConceptRef | None = None

    def __post_init__(self):
        if self.chosen is not None and self.chosen.curie not in {c.curie for c in self.candidates}:
            raise ValueError("chosen concept must be one of the candidates")

    @property
    def item_id(self) -> str:
        return self.base.item_id

    def to_dict(self) -> dict:
        d = self.base.to_dict()
        d["candidates"] = [c.to_dict() for c in self.candidates]
        d["chosen"] = self.chosen.to_dict() if self.chosen else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlignedItem":
        return cls(
            base=ExtractedItem.from_dict(d),
            candidates=tuple(ConceptRef.from_dict(c) for c in d.get("candidates", ())),
            chosen=ConceptRef.from_dict(d["chosen"]) if d.get("chosen") else None,
        )


@dataclass(frozen=True)
class JudgedItem:
    base: AlignedItem
    judge_score: float
    judge_rationale: str = ""

    def __post_init__(self):
        if not 0.0 <= self.judge_score <= 1.0:
            raise ValueError("judge_score must be in [0, 1] (clamp before constructing)")

    @property
    def item_id(self) -> str:
        return self.base.item_id

    def to_dict(self) -> dict:
        d = self.base.to_dict()
        d["judge_score"] = self.judge_score
        d["judge_rationale"] = self.judge_rationale
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "JudgedItem":
        return cls(
            base=AlignedItem.from_dict(d),
            judge_score=float(d["judge_score"]),
            judge_rationale=d.get("judge_rationale", ""),
        )


@dataclass(frozen=True)
class Correction:
    """A field-level patch: records[i].field, records[i] or records[+]."""

    path: str
    value: object

    def to_dict(self) -> dict:
        return {"path": self.path, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Correction":
        return cls(path=d["path"], value=d.get("value"))


@dataclass(frozen=True)
class HumanFeedback:
    corrections: tuple[Correction, ...] = ()
    guidance: str | None = None
    approve: bool = True

    def __post_init__(self):
        if not self.approve and not self.corrections and not (self.guidance or "").strip():
            raise ValueError("non-approving feedback needs corrections or guidance")

    def to_dict(self) -> dict:
        return {
            "corrections": [c.to_dict() for c in self.corrections],
            "guidance": self.guidance,
            "approve": self.approve,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HumanFeedback":
        return cls(
            corrections=tuple(Correction.from_dict(c) for c in d.get("corrections", ())),
            guidance=d.get("guidance"),
            approve=bool(d.get("approve", True)),
        )


# --- stage-tagged record sets ------------------------------------------------

@dataclass(frozen=True)
class ExtractionDraft:
    items: tuple[ExtractedItem, ...]
    stage: str = "extracted"

    def to_dict(self) -> dict:
        return {"stage": self.stage, "items": [i.to_dict() for i in self.items]}


@dataclass(frozen=True)
class AlignedSet:
    items: tuple[AlignedItem, ...]
    stage: str = "aligned"

    def to_dict(self) -> dict:
        return {"stage": self.stage, "items": [i.to_dict() for i in self.items]}


@dataclass(frozen=True)
class JudgedSet:
    items: tuple[JudgedItem, ...]
    stage: str = "judged"

    def to_dict(self) -> dict:
        return {"stage": self.stage, "items": [i.to_dict() for i in self.items]}

    def mean_score(self) -> float:
        if not self.items:
            return 0.0
        return sum(i.judge_score for i in self.items) / len(self.items)


@dataclass(frozen=True)
class FinalOutput:
    run_id: str
    records: tuple[JudgedItem, ...]
    judge_summary: float
    provenance: dict
    hil_applied: bool
    stage: str = "final"

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "records": [r.to_dict() for r in self.records],
            "judge_summary": self.judge_summary,
            "provenance": dict(self.provenance),
            "hil_applied": self.hil_applied,
        }

    def to_bytes(self) -> bytes:
        return (json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "FinalOutput":
        return cls(
            run_id=d["run_id"],
            records=tuple(JudgedItem.from_dict(r) for r in d.get("records", ())),
            judge_summary=float(d.get("judge_summary", 0.0)),
            provenance=dict(d.get("provenance", {})),
            hil_applied=bool(d.get("hil_applied", False)),
        )


def payload_to_dict(payload) -> dict | None:
    if payload is None:
        return None
    d = payload.to_dict()
    if "stage" not in d:
        d["stage"] = payload.stage
    return d


def payload_from_dict(d: dict | None):
    if d is None:
        return None
    stage = d.get("stage")
    if stage == "extracted":
        return ExtractionDraft(items=tuple(ExtractedItem.from_dict(i) for i in d["items"]))
    if stage == "aligned":
        return AlignedSet(items=tuple(AlignedItem.from_dict(i) for i in d["items"]))
    if stage == "judged":
        return JudgedSet(items=tuple(JudgedItem.from_dict(i) for i in d["items"]))
    if stage == "final" or "run_id" in d:
        return FinalOutput.from_dict(d)
    raise ValueError(f"unknown payload stage: {stage!r}")
