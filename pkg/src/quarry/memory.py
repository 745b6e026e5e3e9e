"""Run-scoped shared memory: contextual, entity, and long-term stores.

Contextual and entity memory are keyed by run id so concurrent runs stay
isolated; long-term memory is workspace-scoped and survives restarts through
a single persistence file.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .errors import CorruptSnapshot, UnknownRun, VersionMismatch
from .ingest import normalize_whitespace
from .ontology import tokenize
from .records import ConceptRef

MEMORY_MAGIC = b"SSMEM"
MEMORY_VERSION = 1


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class ContextEntry:
    run_id: str
    stage: str
    key: str
    value: str
    created_at: str


@dataclass
class EntityRecord:
    run_id: str
    canonical_key: str
    occurrences: list[tuple[str, str]]  # (section_id, sentence)
    latest_alignment: ConceptRef | None = None


@dataclass(frozen=True)
class LongTermItem:
    key: str
    value: str
    embedding: tuple[float, ...] | None = None
    created_at: str = ""


def canonical_entity_key(label: str) -> str:
    return normalize_whitespace(label).casefold()


class MemoryStore:
    """Shared memory for one workspace; safe for concurrent runs."""

    def __init__(self, workspace: str = "default"):
        self.workspace = workspace
        self._lock = threading.RLock()
        self._runs: set[str] = set()
        self._context: dict[tuple[str, str, str], ContextEntry] = {}
        self._entities: dict[tuple[str, str], EntityRecord] = {}
        self._longterm: dict[str, LongTermItem] = {}

    # -- run scoping ----------------------------------------------------------

    def register_run(self, run_id: str) -> None:
        with self._lock:
            self._runs.add(run_id)

    def _check_run(self, run_id: str) -> None:
        if run_id not in self._runs:
            raise UnknownRun(run_id)

    def scope(self, run_id: str) -> "RunMemory":
        return RunMemory(self, run_id)

    # -- contextual memory ------------------------------------------------------

    def put_context(self, run_id: str, stage: str, key: str, value: str) -> None:
        with self._lock:
            self._check_run(run_id)
            self._context[(run_id, stage, key)] = ContextEntry(run_id, stage, key, value, _now())

    def read_context(self, run_id: str, stage: str | None = None, key: str | None = None) -> list[ContextEntry]:
        with self._lock:
            self._check_run(run_id)
            entries = [
                e
                for (rid, st, k), e in self._context.items()
                if rid == run_id and (stage is None or st == stage) and (key is None or k == key)
            ]
        return sorted(entries, key=lambda e: (e.stage, e.key))

    # -- entity memory ----------------------------------------------------------

    def upsert_entity(
        self,
        run_id: str,
        label: str,
        occurrence: tuple[str, str],
        alignment: ConceptRef | None = None,
    ) -> EntityRecord:
        with self._lock:
            self._check_run(run_id)
            key = canonical_entity_key(label)
            record = self._entities.get((run_id, key))
            if record is None:
                record = EntityRecord(run_id=run_id, canonical_key=key, occurrences=[])
                self._entities[(run_id, key)] = record
            record.occurrences.append(occurrence)
            if alignment is not None:
                record.latest_alignment = alignment
            return record

    def entities(self, run_id: str) -> list[EntityRecord]:
        with self._lock:
            self._check_run(run_id)
            return sorted(
                (r for (rid, _), r in self._entities.items() if rid == run_id),
                key=lambda r: r.canonical_key,
            )

    # -- long-term memory ----------------------------------------------------------

    def put_longterm(self, key: str, value: str, embedding: list[float] | None = None) -> None:
        with self._lock:
            self._longterm[key] = LongTermItem(
                key=key,
                value=value,
                embedding=tuple(embedding) if embedding is not None else None,
                created_at=_now(),
            )

    def recall_longterm(self, query: str, k: int, embedder=None) -> list[LongTermItem]:
        """Rank long-term items against the query.

        Cosine ranking when an embedder is supplied and every item carries an
        embedding; token-overlap ranking otherwise. Ties break by key.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        with self._lock:
            items = list(self._longterm.values())
        if not items:
            return []

        if embedder is not None and all(i.embedding is not None for i in items):
            (q_vec,) = embedder([query])
            q = np.asarray(q_vec, dtype=float)
            qn = float(np.linalg.norm(q)) or 1.0
            q = q / qn

            def score(item: LongTermItem) -> float:
                v = np.asarray(item.embedding, dtype=float)
                n = float(np.linalg.norm(v)) or 1.0
                return float(np.dot(q, v / n))

        else:
            q_tokens = set(tokenize(query))

            def score(item: LongTermItem) -> float:
                toks = set(tokenize(item.key + " " + item.value))
                if not q_tokens or not toks:
                    return 0.0
                return len(q_tokens & toks) / len(q_tokens)

        ranked = sorted(items, key=lambda i: (-score(i), i.key))
        return ranked[:k]

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        with self._lock:
            payload = {
                "workspace": self.workspace,
                "runs": sorted(self._runs),
                "context": [
                    {"run_id": e.run_id, "stage": e.stage, "key": e.key, "value": e.value, "created_at": e.created_at}
                    for e in self._context.values()
                ],
                "entities": [
                    {
                        "run_id": r.run_id,
                        "canonical_key": r.canonical_key,
                        "occurrences": [list(o) for o in r.occurrences],
                        "latest_alignment": r.latest_alignment.to_dict() if r.latest_alignment else None,
                    }
                    for r in self._entities.values()
                ],
                "longterm": [
                    {
                        "key": i.key,
                        "value": i.value,
                        "embedding": list(i.embedding) if i.embedding is not None else None,
                        "created_at": i.created_at,
                    }
                    for i in self._longterm.values()
                ],
            }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MEMORY_MAGIC + struct.pack(">I", MEMORY_VERSION) + blob)

    @classmethod
    def load(cls, path) -> "MemoryStore":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < len(MEMORY_MAGIC) + 4 or not data.startswith(MEMORY_MAGIC):
            raise CorruptSnapshot("not a memory persistence file")
        (version,) = struct.unpack(">I", data[len(MEMORY_MAGIC) : len(MEMORY_MAGIC) + 4])
        if version != MEMORY_VERSION:
            raise VersionMismatch(version, MEMORY_VERSION)
        try:
            payload = json.loads(data[len(MEMORY_MAGIC) + 4 :])
        except json.JSONDecodeError as e:
            raise CorruptSnapshot(f"unreadable memory payload: {e}") from e
        store = cls(workspace=payload.get("workspace", "default"))
        store._runs = set(payload.get("runs", ()))
        for e in payload.get("context", ()):
            store._context[(e["run_id"], e["stage"], e["key"])] = ContextEntry(
                e["run_id"], e["stage"], e["key"], e["value"], e.get("created_at", "")
            )
        for r in payload.get("entities", ()):
            store._entities[(r["run_id"], r["canonical_key"])] = EntityRecord(
                run_id=r["run_id"],
                canonical_key=r["canonical_key"],
                occurrences=[tuple(o) for o in r.get("occurrences", ())],
                latest_alignment=ConceptRef.from_dict(r["latest_alignment"]) if r.get("latest_alignment") else None,
            )
        for i in payload.get("longterm", ()):
            store._longterm[i["key"]] = LongTermItem(
                key=i["key"],
                value=i["value"],
                embedding=tuple(i["embedding"]) if i.get("embedding") is not None else None,
                created_at=i.get("created_at", ""),
            )
        return store


class RunMemory:
    """Memory handle pre-scoped to one run, handed to agent functions."""

    def __init__(self, store: MemoryStore, run_id: str):
        self.store = store
        self.run_id = run_id

    def put(self, stage: str, key: str, value: str) -> None:
        self.store.put_context(self.run_id, stage, key, value)

    def read(self, stage: str | None = None, key: str | None = None) -> list[ContextEntry]:
        return self.store.read_context(self.run_id, stage=stage, key=key)

    def upsert_entity(self, label: str, occurrence: tuple[str, str], alignment: ConceptRef | None = None) -> EntityRecord:
        return self.store.upsert_entity(self.run_id, label, occurrence, alignment=alignment)
