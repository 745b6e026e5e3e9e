"""Declarative extraction-task specifications.

A task spec is a single YAML document with a closed schema: the task goal,
the output field descriptors, one instruction block per agent role, and
optional free-text constraints. Unknown keys are rejected so typos fail
loudly instead of silently configuring nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigSchemaError, ConfigSyntaxError

AGENT_ROLES = ("extractor", "alignment", "judge", "feedback")

_KNOWN_TOP_KEYS = {"task_id", "goal", "output_schema", "agents", "constraints", "expected_output_example"}
_KNOWN_FIELD_KEYS = {"name", "type", "required", "allowed"}
_FIELD_TYPES = {"text", "number", "boolean", "object", "list"}


@dataclass(frozen=True)
class FieldSpec:
    """One output field: name, semantic type, required flag, allowed values."""

    name: str
    type: str = "text"
    required: bool = True
    allowed: tuple | None = None

    def to_dict(self) -> dict:
        d: dict = {"name": self.name, "type": self.type, "required": self.required}
        if self.allowed is not None:
            d["allowed"] = list(self.allowed)
        return d


@dataclass(frozen=True)
class ExtractionTaskSpec:
    task_id: str
    goal: str
    output_schema: tuple[FieldSpec, ...]
    agent_instructions: dict[str, str]
    constraints: tuple[str, ...] = ()
    expected_output_example: object = None

    def field_names(self) -> list[str]:
        return [f.name for f in self.output_schema]

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "goal": self.goal,
            "output_schema": [f.to_dict() for f in self.output_schema],
            "agents": dict(self.agent_instructions),
            "constraints": list(self.constraints),
            "expected_output_example": self.expected_output_example,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionTaskSpec":
        return cls(
            task_id=d["task_id"],
            goal=d.get("goal", ""),
            output_schema=tuple(
                FieldSpec(
                    name=f["name"],
                    type=f.get("type", "text"),
                    required=bool(f.get("required", True)),
                    allowed=tuple(f["allowed"]) if f.get("allowed") is not None else None,
                )
                for f in d.get("output_schema", [])
            ),
            agent_instructions=dict(d.get("agents", {})),
            constraints=tuple(d.get("constraints", ())),
            expected_output_example=d.get("expected_output_example"),
        )


def load_task_spec(source: bytes | str | Path) -> ExtractionTaskSpec:
    """Parse and validate a task-spec configuration document.

    Raises ConfigSyntaxError for malformed YAML and ConfigSchemaError naming
    every missing/invalid path for schema problems.
    """
    if isinstance(source, Path):
        source = source.read_bytes()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if not source.strip():
        raise ConfigSyntaxError("empty task spec document")
    try:
        raw = yaml.safe_load(source)
    except yaml.YAMLError as e:
        raise ConfigSyntaxError(f"malformed task spec: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigSyntaxError("task spec must be a mapping at top level")

    problems: list[str] = []
    for key in sorted(set(raw) - _KNOWN_TOP_KEYS):
        problems.append(f"unknown key: {key}")

    task_id = raw.get("task_id")
    if not isinstance(task_id, str) or not task_id.strip():
        problems.append("task_id: must be a non-empty string")

    goal = raw.get("goal")
    if not isinstance(goal, str) or not goal.strip():
        problems.append("goal: must be a non-empty string")

    fields = _validate_fields(raw.get("output_schema"), problems)
    agents = _validate_agents(raw.get("agents"), problems)

    constraints = raw.get("constraints", [])
    if constraints is None:
        constraints = []
    if not isinstance(constraints, list) or any(not isinstance(c, str) for c in constraints):
        problems.append("constraints: must be a list of strings")
        constraints = []

    if problems:
        raise ConfigSchemaError(problems)

    return ExtractionTaskSpec(
        task_id=task_id.strip(),
        goal=goal.strip(),
        output_schema=tuple(fields),
        agent_instructions=agents,
        constraints=tuple(constraints),
        expected_output_example=raw.get("expected_output_example"),
    )


def _validate_fields(raw, problems: list[str]) -> list[FieldSpec]:
    if not isinstance(raw, list) or not raw:
        problems.append("output_schema: must be a non-empty list of field descriptors")
        return []
    fields: list[FieldSpec] = []
    seen: set[str] = set()
    for i, f in enumerate(raw):
        at = f"output_schema[{i}]"
        if not isinstance(f, dict):
            problems.append(f"{at}: must be a mapping")
            continue
        for key in sorted(set(f) - _KNOWN_FIELD_KEYS):
            problems.append(f"{at}: unknown key: {key}")
        name = f.get("name")
        if not isinstance(name, str) or not name.strip():
            problems.append(f"{at}.name: must be a non-empty string")
            continue
        if name in seen:
            problems.append(f"{at}.name: duplicate field {name!r}")
            continue
        seen.add(name)
        ftype = f.get("type", "text")
        if ftype not in _FIELD_TYPES:
            problems.append(f"{at}.type: {ftype!r} is not one of {sorted(_FIELD_TYPES)}")
            continue
        allowed = f.get("allowed")
        if allowed is not None and (not isinstance(allowed, list) or not allowed):
            problems.append(f"{at}.allowed: must be a non-empty list when given")
            continue
        fields.append(
            FieldSpec(
                name=name,
                type=ftype,
                required=bool(f.get("required", True)),
                allowed=tuple(allowed) if allowed else None,
            )
        )
    return fields


def _validate_agents(raw, problems: list[str]) -> dict[str, str]:
    if not isinstance(raw, dict):
        problems.append("agents: must be a mapping with one block per role")
        return {}
    agents: dict[str, str] = {}
    for key in sorted(set(raw) - set(AGENT_ROLES)):
        problems.append(f"agents: unknown role: {key}")
    for role in AGENT_ROLES:
        if role not in raw:
            problems.append(f"agents.{role}: missing instruction block")
            continue
        block = raw[role]
        if block is None:
            block = ""
        if not isinstance(block, str):
            problems.append(f"agents.{role}: must be text")
            continue
        # Only the feedback block may be empty.
        if role != "feedback" and not block.strip():
            problems.append(f"agents.{role}: instruction block may not be empty")
            continue
        agents[role] = block.strip()
    return agents
