"""Deterministic rule-based stand-in models for the offline demo.

The resolver plays all four agent roles with fixed rules (term lookup for
extraction, best token-overlap candidate for alignment, flat scoring for the
judge, guidance-aware pass-through for feedback), so whole pipeline runs are
reproducible without network access. Recording a run through it produces the
digest-keyed completions file replayed by `--fixtures`.
"""

from __future__ import annotations

import json
import re

from .gateway import ModelRef, ScriptedChatProvider
from .ingest import split_sentences
from .ontology import tokenize

# Surface forms the demo extractor recognizes, with their type tags.
DEMO_TERMS = {
    "working memory": "COGNITIVE_PROCESS",
    "cortex": "ANATOMICAL_REGION",
    "neuron": "CELL_TYPE",
    "gliosis": "PATHOLOGY",
}

# Which ontologies an entity type plausibly lives in; the demo aligner uses
# this the way a real model would use domain knowledge when the sentence
# itself carries no discriminating words.
TYPE_AFFINITY = {
    "ANATOMICAL_REGION": {"Uberon", "Developing Mouse Brain Atlas Ontology", "Anatomical Entity Ontology", "Biological Spatial Ontology"},
    "CELL_TYPE": {"Cell Ontology"},
    "COGNITIVE_PROCESS": {"NeuroBehavior Ontology"},
    "PATHOLOGY": {"Pathbase Mouse Pathology Ontology", "Alzheimer's Disease Ontology"},
    "PLANT_TISSUE": {"Plant Ontology"},
}

_STOPWORDS = frozenset(
    "a an and are as at be between by for from in into is it its of on or the this that to was were which while with".split()
)

_SECTION_BLOCK = re.compile(r"^\[section:([^\]]+)\] .*?$", re.MULTILINE)


def demo_resolver(model: ModelRef, messages: list[dict], decoding) -> str:
    """Dispatch on the model name assigned to each role in the demo profiles."""
    name = model.model_name
    user = messages[-1]["content"]
    if "extractor" in name:
        return _extract(user)
    if "alignment" in name:
        return _align(user)
    if "judge" in name:
        return _judge(user)
    if "feedback" in name:
        return _feedback(user)
    raise ValueError(f"demo resolver has no rule for model {name!r}")


def _extract(source: str) -> str:
    sections: list[tuple[str, str]] = []
    matches = list(_SECTION_BLOCK.finditer(source))
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(source)
        body = source[m.end() : end].strip()
        sections.append((m.group(1), body))

    items = []
    for sid, body in sections:
        for sentence in split_sentences(body):
            lowered = sentence.lower()
            for term, entity_type in DEMO_TERMS.items():
                if term in lowered:
                    items.append(
                        {
                            "item_id": f"i{len(items):03d}",
                            "label": term,
                            "entity_type": entity_type,
                            "value": None,
                            "source_sentence": sentence.strip(),
                            "section_id": sid,
                        }
                    )
    # one record per (term, section): keep first mention only
    seen = set()
    unique = []
    for item in items:
        key = (item["label"], item["section_id"])
        if key not in seen:
            seen.add(key)
            unique.append(item)
    for i, item in enumerate(unique):
        item["item_id"] = f"i{i:03d}"
    return json.dumps(unique, sort_keys=True)


def _align(payload: str) -> str:
    items = json.loads(payload)
    out = []
    for item in items:
        sentence_tokens = set(tokenize(item["source_sentence"])) - _STOPWORDS
        affinity = TYPE_AFFINITY.get(item.get("entity_type", ""), set())
        best = None
        best_key = None
        for rank, cand in enumerate(item.get("candidates", [])):
            if cand["label"].lower() != item["label"].lower():
                continue
            overlap = len((set(tokenize(cand.get("definition", ""))) - _STOPWORDS) & sentence_tokens)
            key = (overlap, 1 if cand.get("ontology_name") in affinity else 0, -rank)
            if best_key is None or key > best_key:
                best_key = key
                best = cand["curie"]
        out.append({"item_id": item["item_id"], "chosen_curie": best})
    return json.dumps(out, sort_keys=True)


def _judge(payload: str) -> str:
    items = json.loads(payload)
    out = []
    for item in items:
        grounded = item.get("chosen") is not None
        out.append(
            {
                "item_id": item["item_id"],
                "score": 0.9 if grounded else 0.7,
                "rationale": "label grounded in the store" if grounded else "no concept fits this label",
            }
        )
    return json.dumps(out, sort_keys=True)


_DROP_RULE = re.compile(r"drop items below score ([0-9.]+)")


def _feedback(payload: str) -> str:
    body = json.loads(payload)
    records = body["records"]
    guidance = (body.get("reviewer_guidance") or "").lower()
    m = _DROP_RULE.search(guidance)
    if m:
        threshold = float(m.group(1))
        records = [r for r in records if r.get("judge_score", 0.0) >= threshold]
    return json.dumps(records, sort_keys=True)


def demo_chat_provider(fixtures: dict | None = None, record: dict | None = None) -> ScriptedChatProvider:
    return ScriptedChatProvider(fixtures=fixtures, resolver=demo_resolver, record=record)
