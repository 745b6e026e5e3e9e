"""The four pipeline agents: extractor, alignment, judge, feedback.

Each agent is a prompt-assembly plus structured-output-parsing function over
the gateway. Malformed model output never crashes a stage directly: parsing
yields a RepairRequest whose errors are appended to the next prompt, bounded
by the run's repair budget, after which the stage fails with StageError.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources

from .errors import CandidateEscape, EmptyIndex, StageError
from .gateway import Decoding
from .ingest import DocumentChunk, SourceDocument
from .ontology import OntologyStore
from .records import (
    AlignedItem,
    ConceptRef,
    ExtractedItem,
    FinalOutput,
    HumanFeedback,
    JudgedItem,
)
from .taskspec import ExtractionTaskSpec, FieldSpec

logger = logging.getLogger(__name__)

# Field names owned by the record structure itself; anything else declared in
# a task schema lands in the item's extras mapping.
STRUCTURAL_FIELDS = {"item_id", "label", "entity_type", "value", "source_sentence", "section_id"}

ALIGNMENT_WIRE_FIELDS = (
    FieldSpec("item_id"),
    FieldSpec("chosen_curie", required=False),
)
JUDGE_WIRE_FIELDS = (
    FieldSpec("item_id"),
    FieldSpec("score", type="number"),
    FieldSpec("rationale", required=False),
)

_TYPE_CHECKS = {
    "text": lambda v: isinstance(v, str),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "object": lambda v: isinstance(v, dict),
    "list": lambda v: isinstance(v, list),
}

_JSON_START = re.compile(r"[\[{]")


@dataclass(frozen=True)
class RepairRequest:
    """Validation failure carried back into the next prompt."""

    errors: tuple[str, ...]
    raw_text: str


def load_prompt(role: str) -> str:
    return resources.files("quarry.prompts").joinpath(f"{role}.txt").read_text(encoding="utf-8")


# --- structured-output parsing ------------------------------------------------

def parse_agent_output(text: str, fields) -> list[dict] | RepairRequest:
    """Extract the first JSON payload from model text and validate it.

    Accepts a bare array, a bare object (treated as a one-record array), or
    an object wrapping the array under "items"/"records". Code fences and
    surrounding prose are skipped; a second concatenated payload is ignored
    with a warning. Validation failures come back as a RepairRequest.
    """
    found = _first_json_value(text)
    if found is None:
        return RepairRequest(errors=("no JSON payload found in output",), raw_text=text)
    value, end = found
    if _first_json_value(text[end:]) is not None:
        logger.warning("multiple JSON payloads in model output; using the first")

    if isinstance(value, dict):
        for key in ("items", "records"):
            if isinstance(value.get(key), list):
                value = value[key]
                break
        else:
            value = [value]
    if not isinstance(value, list):
        return RepairRequest(errors=("top-level JSON payload must be an array of records",), raw_text=text)

    errors = validate_records(value, fields)
    if errors:
        return RepairRequest(errors=tuple(errors), raw_text=text)
    return value


def _first_json_value(text: str):
    decoder = json.JSONDecoder()
    for m in _JSON_START.finditer(text):
        try:
            return decoder.raw_decode(text, m.start())
        except ValueError:
            continue
    return None


def validate_records(records: list, fields) -> list[str]:
    errors: list[str] = []
    for i, obj in enumerate(records):
        if not isinstance(obj, dict):
            errors.append(f"item {i}: must be a JSON object")
            continue
        for f in fields:
            value = obj.get(f.name)
            if value is None or value == "":
                if f.required:
                    errors.append(f"item {i}: missing required field '{f.name}'")
                continue
            if not _TYPE_CHECKS[f.type](value):
                errors.append(f"item {i}: field '{f.name}' must be of type {f.type}")
                continue
            if f.allowed is not None and value not in f.allowed:
                errors.append(f"item {i}: field '{f.name}' value {value!r} not in allowed set")
    return errors


# --- prompt assembly ------------------------------------------------------------

def render_schema(fields) -> str:
    lines = []
    for f in fields:
        req = "required" if f.required else "optional"
        line = f"- {f.name} ({f.type}, {req})"
        if f.allowed is not None:
            line += "; allowed values: " + ", ".join(str(a) for a in f.allowed)
        lines.append(line)
    return "\n".join(lines)


def build_system_prompt(role: str, spec: ExtractionTaskSpec, schema_fields=None) -> str:
    parts = [load_prompt(role).strip()]
    parts.append("## Task goal\n" + spec.goal)
    if schema_fields:
        parts.append("## Output fields\n" + render_schema(schema_fields))
    if spec.constraints:
        parts.append("## Constraints\n" + "\n".join(f"- {c}" for c in spec.constraints))
    block = spec.agent_instructions.get(role, "")
    if block:
        parts.append("## Operator instructions\n" + block)
    if role == "extractor" and spec.expected_output_example is not None:
        parts.append("## Example output\n" + json.dumps(spec.expected_output_example, sort_keys=True, ensure_ascii=False))
    return "\n\n".join(parts)


def render_source(doc: SourceDocument | DocumentChunk) -> str:
    if isinstance(doc, DocumentChunk):
        ids = ",".join(doc.section_ids)
        return f"[section:{ids}]\n{doc.text}"
    blocks = []
    for sec in doc.sections:
        blocks.append(f"[section:{sec.section_id}] {sec.heading}\n{sec.body}")
    return "\n\n".join(blocks)


def build_extractor_messages(spec: ExtractionTaskSpec, doc) -> list[dict]:
    return [
        {"role": "system", "content": build_system_prompt("extractor", spec, spec.output_schema)},
        {"role": "user", "content": render_source(doc)},
    ]


def build_alignment_messages(spec: ExtractionTaskSpec, items_payload: list[dict]) -> list[dict]:
    return [
        {"role": "system", "content": build_system_prompt("alignment", spec)},
        {"role": "user", "content": json.dumps(items_payload, sort_keys=True, ensure_ascii=False)},
    ]


def build_judge_messages(spec: ExtractionTaskSpec, items_payload: list[dict]) -> list[dict]:
    return [
        {"role": "system", "content": build_system_prompt("judge", spec)},
        {"role": "user", "content": json.dumps(items_payload, sort_keys=True, ensure_ascii=False)},
    ]


def build_feedback_messages(spec: ExtractionTaskSpec, items_payload: list[dict], guidance: str | None) -> list[dict]:
    body = {"records": items_payload, "reviewer_guidance": guidance or ""}
    return [
        {"role": "system", "content": build_system_prompt("feedback", spec)},
        {"role": "user", "content": json.dumps(body, sort_keys=True, ensure_ascii=False)},
    ]


def build_repair_messages(messages: list[dict], raw_text: str, errors) -> list[dict]:
    complaint = "Your output failed validation:\n" + "\n".join(f"- {e}" for e in errors)
    return list(messages) + [
        {"role": "assistant", "content": raw_text},
        {"role": "user", "content": complaint + "\nEmit ONLY the corrected JSON payload."},
    ]


# --- repair loop ----------------------------------------------------------------

def _run_stage(gateway, profile, messages, fields, run_id, role, max_repairs, extra_check=None):
    """Call the model, validate, and repair up to max_repairs times.

    Returns (records, repair_attempts). extra_check(records) -> error list
    runs semantic validation beyond field shapes.
    """
    decoding = Decoding(temperature=profile.temperature, max_output_tokens=profile.max_output_tokens)
    attempts = 0
    while True:
        completion = gateway.complete(profile.model, messages, decoding, run_id=run_id, agent_role=role)
        parsed = parse_agent_output(completion.text, fields)
        if isinstance(parsed, RepairRequest):
            errors = list(parsed.errors)
            raw = parsed.raw_text
        else:
            errors = list(extra_check(parsed)) if extra_check else []
            raw = completion.text
            if not errors:
                return parsed, attempts
        if attempts >= max_repairs:
            raise StageError(role, "; ".join(errors[:5]) or "invalid output")
        logger.info("%s output invalid (attempt %d): %s", role, attempts + 1, errors[:3])
        messages = build_repair_messages(messages, raw, errors)
        attempts += 1


# --- extractor ------------------------------------------------------------------

def run_extractor(gateway, memory, spec: ExtractionTaskSpec, doc, profile, options) -> list[ExtractedItem]:
    """Convert raw section text into structured items with provenance."""
    source_ids = set(doc.section_ids()) if isinstance(doc, SourceDocument) else set(doc.section_ids)
    if not render_source(doc).strip():
        raise ValueError("document text must be non-empty")

    fields = _extractor_fields(spec)
    messages = build_extractor_messages(spec, doc)

    def check(records: list[dict]) -> list[str]:
        errors = []
        for i, obj in enumerate(records):
            sid = obj.get("section_id")
            if sid not in source_ids:
                errors.append(f"item {i}: unknown section_id {sid!r}")
        return errors

    records, attempts = _run_stage(
        gateway, profile, messages, fields, memory.run_id, "extractor", options.max_repair_attempts, check
    )

    items = []
    for i, obj in enumerate(records):
        item = ExtractedItem(
            item_id=str(obj.get("item_id") or f"i{i:03d}"),
            label=str(obj["label"]),
            entity_type=str(obj.get("entity_type", "")),
            value=None if obj.get("value") is None else str(obj["value"]),
            source_sentence=str(obj.get("source_sentence", "")),
            section_id=str(obj["section_id"]),
            extras={k: v for k, v in obj.items() if k not in STRUCTURAL_FIELDS and _declared(spec, k)},
        )
        if not item.label_in_sentence():
            item = ExtractedItem(**{**item.to_dict(), "extras": item.extras, "non_literal": True})
            logger.warning("item %s label not found verbatim in its sentence; flagged non-literal", item.item_id)
        items.append(item)
        memory.upsert_entity(item.label, (item.section_id, item.source_sentence))

    memory.put("extractor", "output", json.dumps([i.to_dict() for i in items], sort_keys=True))
    memory.put("extractor", "repair_attempts", str(attempts))
    return items


def _declared(spec: ExtractionTaskSpec, key: str) -> bool:
    return key in spec.field_names()


def _extractor_fields(spec: ExtractionTaskSpec) -> list[FieldSpec]:
    fields = list(spec.output_schema)
    names = {f.name for f in fields}
    for required in ("label", "section_id", "source_sentence"):
        if required not in names:
            fields.append(FieldSpec(required))
    return fields


# --- alignment ------------------------------------------------------------------

def run_alignment(
    gateway,
    store: OntologyStore,
    memory,
    items: list[ExtractedItem],
    top_k: int,
    alpha: float,
    embedder,
    profile,
    options,
    spec: ExtractionTaskSpec,
) -> list[AlignedItem]:
    """Ground each item in the concept store via hybrid search + model choice."""
    if len(store) == 0:
        raise EmptyIndex("alignment requires a non-empty concept store")
    if not items:
        return []

    candidates: dict[str, tuple[ConceptRef, ...]] = {}
    payload = []
    for item in items:
        query = f"{item.label}. {item.source_sentence}"
        hits = store.hybrid_search(query, top_k, alpha, embedder)
        refs = tuple(
            ConceptRef(
                curie=h.term.curie,
                iri=h.term.iri,
                label=h.term.label,
                ontology_name=h.term.ontology_name,
                fused_score=min(1.0, max(0.0, h.fused_score)),
            )
            for h in hits
        )
        candidates[item.item_id] = refs
        payload.append(
            {
                "item_id": item.item_id,
                "label": item.label,
                "entity_type": item.entity_type,
                "source_sentence": item.source_sentence,
                "candidates": [
                    {
                        "curie": r.curie,
                        "label": r.label,
                        "ontology_name": r.ontology_name,
                        "definition": store.get(r.curie).definition,
                    }
                    for r in refs
                ],
            }
        )

    messages = build_alignment_messages(spec, payload)

    def check(records: list[dict]) -> list[str]:
        errors = []
        seen = set()
        for i, obj in enumerate(records):
            item_id = obj.get("item_id")
            if item_id not in candidates:
                errors.append(f"item {i}: unknown item_id {item_id!r}")
                continue
            seen.add(item_id)
            curie = obj.get("chosen_curie")
            if curie is not None and curie not in {r.curie for r in candidates[item_id]}:
                errors.append(str(CandidateEscape(item_id, curie)))
        for item in items:
            if item.item_id not in seen:
                errors.append(f"missing decision for item {item.item_id}")
        return errors

    records, _ = _run_stage(
        gateway, profile, messages, ALIGNMENT_WIRE_FIELDS, memory.run_id, "alignment", options.max_repair_attempts, check
    )

    chosen_by_id = {obj["item_id"]: obj.get("chosen_curie") for obj in records}
    aligned = []
    for item in items:
        refs = candidates[item.item_id]
        curie = chosen_by_id.get(item.item_id)
        chosen = next((r for r in refs if r.curie == curie), None)
        aligned.append(AlignedItem(base=item, candidates=refs, chosen=chosen))
        memory.upsert_entity(item.label, (item.section_id, item.source_sentence), alignment=chosen)

    memory.put("alignment", "output", json.dumps([a.to_dict() for a in aligned], sort_keys=True))
    return aligned


# --- judge ----------------------------------------------------------------------

def run_judge(gateway, memory, items: list[AlignedItem], profile, options, spec: ExtractionTaskSpec) -> list[JudgedItem]:
    """Score each aligned item with a confidence in [0, 1]."""
    if not items:
        return []
    payload = [i.to_dict() for i in items]
    messages = build_judge_messages(spec, payload)
    wanted = {i.item_id for i in items}

    def check(records: list[dict]) -> list[str]:
        errors = []
        seen = set()
        for i, obj in enumerate(records):
            item_id = obj.get("item_id")
            if item_id not in wanted:
                errors.append(f"item {i}: unknown item_id {item_id!r}")
            seen.add(item_id)
        for item_id in sorted(wanted - seen):
            errors.append(f"missing score for item {item_id}")
        return errors

    records, _ = _run_stage(
        gateway, profile, messages, JUDGE_WIRE_FIELDS, memory.run_id, "judge", options.max_repair_attempts, check
    )

    by_id = {obj["item_id"]: obj for obj in records}
    judged = []
    for item in items:
        obj = by_id[item.item_id]
        score = float(obj["score"])
        if not 0.0 <= score <= 1.0:
            clamped = min(1.0, max(0.0, score))
            logger.warning("judge score %.3f for item %s out of range; clamped to %.1f", score, item.item_id, clamped)
            score = clamped
        judged.append(JudgedItem(base=item, judge_score=score, judge_rationale=str(obj.get("rationale", ""))))

    memory.put("judge", "output", json.dumps([j.to_dict() for j in judged], sort_keys=True))
    memory.put("judge", "mean_score", repr(sum(j.judge_score for j in judged) / len(judged)))
    return judged


# --- feedback -------------------------------------------------------------------

def run_feedback(
    gateway,
    memory,
    items: list[JudgedItem],
    human: HumanFeedback | None,
    profile,
    options,
    spec: ExtractionTaskSpec,
    run_id: str,
    doc_id: str,
    hil_applied: bool,
    section_ids: set[str] | None = None,
) -> FinalOutput:
    """Finalize judged records, folding in reviewer guidance and corrections.

    Fields addressed by human corrections are immune to the model: they are
    re-applied verbatim after the model's output is parsed, and corrected or
    reviewer-added records that the model dropped are reinserted. Records may
    only point at sections of the source document.
    """
    guidance = human.guidance if human else None
    payload = [i.to_dict() for i in items]
    messages = build_feedback_messages(spec, payload, guidance)

    def check(records: list[dict]) -> list[str]:
        errors = []
        if section_ids is not None:
            for i, obj in enumerate(records):
                sid = obj.get("section_id")
                if sid is not None and sid not in section_ids:
                    errors.append(f"item {i}: unknown section_id {sid!r}")
        return errors

    fields = [FieldSpec("item_id"), FieldSpec("label")]
    records, _ = _run_stage(
        gateway, profile, messages, fields, memory.run_id, "feedback", options.max_repair_attempts, check
    )

    by_input_id = {i.item_id: i for i in items}
    order = {i.item_id: n for n, i in enumerate(items)}
    final: list[JudgedItem] = []
    for obj in records:
        source = by_input_id.get(obj.get("item_id"))
        if source is None:
            logger.warning("feedback model invented record %r; dropped", obj.get("item_id"))
            continue
        final.append(_merge_model_record(source, obj))

    final = _enforce_pins(final, items, human, order)
    final_set = tuple(final)
    mean = sum(r.judge_score for r in final_set) / len(final_set) if final_set else 0.0
    output = FinalOutput(
        run_id=run_id,
        records=final_set,
        judge_summary=mean,
        provenance={
            "doc_id": doc_id,
            "section_ids": sorted({r.base.base.section_id for r in final_set}),
        },
        hil_applied=hil_applied,
    )
    memory.put("feedback", "output", json.dumps(output.to_dict(), sort_keys=True))
    return output


def _merge_model_record(source: JudgedItem, obj: dict) -> JudgedItem:
    """Fold the editable fields of a model record onto its source item."""
    base = source.base.base
    new_base = ExtractedItem(
        item_id=base.item_id,
        label=str(obj.get("label", base.label) or base.label),
        entity_type=str(obj.get("entity_type", base.entity_type)),
        value=obj.get("value", base.value),
        source_sentence=str(obj.get("source_sentence", base.source_sentence)),
        section_id=str(obj.get("section_id", base.section_id)),
        extras={**base.extras, **{k: v for k, v in obj.get("extras", {}).items()}},
        non_literal=base.non_literal,
    )
    chosen = source.base.chosen
    if "chosen" in obj:
        wanted = obj["chosen"]
        curie = wanted.get("curie") if isinstance(wanted, dict) else wanted
        if curie is None:
            chosen = None
        else:
            match = next((c for c in source.base.candidates if c.curie == curie), None)
            if match is not None:
                chosen = match
            else:
                logger.warning("feedback model chose %r outside candidates; keeping prior alignment", curie)
    score = obj.get("judge_score", source.judge_score)
    if not isinstance(score, (int, float)) or isinstance(score, bool):
        score = source.judge_score
    score = min(1.0, max(0.0, float(score)))
    return JudgedItem(
        base=AlignedItem(base=new_base, candidates=source.base.candidates, chosen=chosen),
        judge_score=score,
        judge_rationale=str(obj.get("judge_rationale", source.judge_rationale)),
    )


def _enforce_pins(final, items, human, order) -> list[JudgedItem]:
    """Re-apply human corrections on top of whatever the model produced."""
    if human is None or not human.corrections:
        return final

    # index-addressed corrections refer to positions in `items`
    field_pins: dict[str, dict[str, object]] = {}
    record_pins: set[str] = set()
    for corr in human.corrections:
        m = re.fullmatch(r"records\[(\d+)\](?:\.(\w+))?", corr.path)
        if not m:
            continue
        idx = int(m.group(1))
        if idx >= len(items):
            continue
        item_id = items[idx].item_id
        if m.group(2):
            field_pins.setdefault(item_id, {})[m.group(2)] = corr.value
        else:
            record_pins.add(item_id)

    by_final_id = {r.item_id: r for r in final}
    # reinsert pinned records the model dropped, in original order
    pinned_ids = set(field_pins) | record_pins
    for item in items:
        if item.item_id in pinned_ids and item.item_id not in by_final_id:
            pos = min(order[item.item_id], len(final))
            final = final[:pos] + [item] + final[pos:]
            by_final_id[item.item_id] = item
            logger.warning("feedback model dropped corrected record %s; reinserted", item.item_id)

    out = []
    for record in final:
        pins = field_pins.get(record.item_id)
        if record.item_id in record_pins:
            # whole record pinned: restore the reviewer-merged version
            record = next(i for i in items if i.item_id == record.item_id)
        if pins:
            record = apply_field_values(record, pins)
        out.append(record)
    return out


def apply_field_values(item: JudgedItem, values: dict[str, object]) -> JudgedItem:
    """Set item fields to the given values verbatim; used by corrections."""
    base = item.base.base
    base_fields = base.to_dict()
    chosen = item.base.chosen
    candidates = item.base.candidates
    score = item.judge_score
    rationale = item.judge_rationale
    for name, value in values.items():
        if name == "chosen":
            if value is None:
                chosen = None
            else:
                ref = ConceptRef.from_dict(value) if isinstance(value, dict) else ConceptRef(
                    curie=str(value), iri="", label="", ontology_name=""
                )
                if ref.curie not in {c.curie for c in candidates}:
                    candidates = candidates + (ref,)
                chosen = ref
        elif name == "judge_score":
            score = min(1.0, max(0.0, float(value)))
        elif name == "judge_rationale":
            rationale = str(value)
        elif name in STRUCTURAL_FIELDS and name != "item_id":
            base_fields[name] = value
        else:
            base_fields.setdefault("extras", {})
            base_fields["extras"][name] = value
    new_base = ExtractedItem.from_dict(base_fields)
    return JudgedItem(
        base=AlignedItem(base=new_base, candidates=candidates, chosen=chosen),
        judge_score=score,
        judge_rationale=rationale,
    )
