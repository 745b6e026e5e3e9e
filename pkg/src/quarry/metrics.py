"""Evaluation metrics over review files and run artifacts.

Confusion counts come straight from reviewer verdicts (correct -> TP,
incorrect -> FP, missing -> FN); precision/recall/F1 are micro-averaged by
summing counts before dividing. Alignment rate, detection coverage, Shannon
diversity, judge statistics, section distribution and usage summaries round
out the report.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .errors import EmptyDistribution, EmptyInput, FormatError, LengthMismatch
from .gateway import UsageLedger, summarize_usage
from .ingest import normalize_whitespace

CANONICAL_SECTIONS = ("Abstract", "Introduction", "Methods", "Results", "Discussion", "Other")

DEFAULT_SECTION_ALIASES = {
    "background": "Introduction",
    "intro": "Introduction",
    "related work": "Introduction",
    "materials and methods": "Methods",
    "method": "Methods",
    "experimental setup": "Methods",
    "experiments": "Results",
    "findings": "Results",
    "conclusion": "Discussion",
    "conclusions": "Discussion",
    "general discussion": "Discussion",
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be >= 0")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


class PrecisionRecallF1(NamedTuple):
    precision: float
    recall: float
    f1: float


def harmonic_f1(precision: float, recall: float) -> float:
    """F1 as the harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def prf(counts: ConfusionCounts) -> PrecisionRecallF1:
    """Precision, recall, F1 with the 0/0 -> 0 convention."""
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    return PrecisionRecallF1(precision, recall, harmonic_f1(precision, recall))


def counts_from_review(data: bytes | str) -> ConfusionCounts:
    """Tally verdicts from a review file.

    Rows still marked unreviewed are rejected (the metrics require total
    labeling), as is any malformed row, with its line number.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    rows = list(csv.reader(io.StringIO(data)))
    if not rows:
        raise FormatError(1, "empty review file")
    if len(rows[0]) != 3:
        raise FormatError(1, f"header row must have 3 columns (task_id, run_id, model_name), got {len(rows[0])}")
    tp = fp = fn = 0
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 5:
            raise FormatError(line_no, f"field rows must have 5 columns, got {len(row)}")
        verdict = row[2]
        if verdict == "correct":
            tp += 1
        elif verdict == "incorrect":
            fp += 1
        elif verdict == "missing":
            fn += 1
        elif verdict == "unreviewed":
            raise FormatError(line_no, "unreviewed row; review files must be fully labeled")
        else:
            raise FormatError(line_no, f"unknown verdict {verdict!r}")
    return ConfusionCounts(tp, fp, fn)


def micro_average(files: Iterable[bytes | str]) -> dict:
    """Sum confusion counts over files, then apply prf once."""
    files = list(files)
    if not files:
        raise ValueError("micro_average needs at least one review file")
    total = ConfusionCounts(0, 0, 0)
    for data in files:
        total = total + counts_from_review(data)
    p, r, f1 = prf(total)
    return {
        "tp": total.tp,
        "fp": total.fp,
        "fn": total.fn,
        "precision": p,
        "recall": r,
        "f1": f1,
    }


def _normalize_curie(curie: str) -> str:
    prefix, sep, local = curie.partition(":")
    return prefix.upper() + sep + local


def concept_alignment_rate(
    predicted: list[tuple[str, str, str]],
    gold: list[tuple[str, str, str]],
) -> float:
    """Percent of rows whose (curie, label, ontology_name) all match exactly.

    Curie prefixes are case-normalized before comparison; labels and ontology
    names must match verbatim.
    """
    if len(predicted) != len(gold):
        raise LengthMismatch(f"predicted has {len(predicted)} rows, gold has {len(gold)}")
    if not predicted:
        raise ValueError("alignment rate needs at least one row")
    aligned = 0
    for (p_curie, p_label, p_onto), (g_curie, g_label, g_onto) in zip(predicted, gold):
        if _normalize_curie(p_curie) == _normalize_curie(g_curie) and p_label == g_label and p_onto == g_onto:
            aligned += 1
    return aligned / len(predicted) * 100.0


def alignment_mismatches(
    predicted: list[tuple[str, str, str]],
    gold: list[tuple[str, str, str]],
) -> list[dict]:
    """Rows that fail exact matching, surfaced for manual near-miss review."""
    if len(predicted) != len(gold):
        raise LengthMismatch(f"predicted has {len(predicted)} rows, gold has {len(gold)}")
    rows = []
    for i, ((p_curie, p_label, p_onto), (g_curie, g_label, g_onto)) in enumerate(zip(predicted, gold)):
        if _normalize_curie(p_curie) == _normalize_curie(g_curie) and p_label == g_label and p_onto == g_onto:
            continue
        rows.append(
            {
                "row": i,
                "predicted": {"curie": p_curie, "label": p_label, "ontology_name": p_onto},
                "gold": {"curie": g_curie, "label": g_label, "ontology_name": g_onto},
            }
        )
    return rows


def detection_coverage(per_model_entities: dict[str, Iterable[str]]) -> dict[str, float]:
    """Each model's share of the union pool of unique entities."""
    if not per_model_entities:
        raise ValueError("detection coverage needs at least one model")
    normalized = {
        model: {normalize_whitespace(e).casefold() for e in entities}
        for model, entities in per_model_entities.items()
    }
    pool = set().union(*normalized.values())
    if not pool:
        raise ValueError("entity pool is empty")
    return {model: len(entities) / len(pool) for model, entities in sorted(normalized.items())}


def shannon_diversity(type_counts: dict[str, int | float]) -> float:
    """H = -sum(p_i ln p_i) over entity types with nonzero counts, in nats."""
    if not type_counts:
        raise EmptyDistribution("no entity types")
    if any(c < 0 for c in type_counts.values()):
        raise ValueError("counts must be >= 0")
    total = sum(type_counts.values())
    if total <= 0:
        raise EmptyDistribution("all counts are zero")
    h = 0.0
    for count in type_counts.values():
        if count > 0:
            p = count / total
            h -= p * math.log(p)
    return h


def judge_stats(scores: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1); a single score has std 0."""
    if not scores:
        raise EmptyInput("no judge scores")
    if any(not 0.0 <= s <= 1.0 for s in scores):
        raise ValueError("judge scores must be in [0, 1]")
    n = len(scores)
    mean = sum(scores) / n
    if n == 1:
        return mean, 0.0
    var = sum((s - mean) ** 2 for s in scores) / (n - 1)
    return mean, math.sqrt(var)


def section_distribution(
    headings: list[str],
    canonical_map: dict[str, str] | None = None,
) -> dict[str, float]:
    """Percent of items per canonical section; unmatched headings are Other."""
    if not headings:
        raise ValueError("section distribution needs at least one item")
    aliases = {k.casefold(): v for k, v in DEFAULT_SECTION_ALIASES.items()}
    if canonical_map:
        aliases.update({k.casefold(): v for k, v in canonical_map.items()})
    canonical_lower = {name.casefold(): name for name in CANONICAL_SECTIONS}

    counts = {name: 0 for name in CANONICAL_SECTIONS}
    for heading in headings:
        key = normalize_whitespace(heading).casefold()
        name = canonical_lower.get(key) or aliases.get(key, "Other")
        if name not in counts:
            name = "Other"
        counts[name] += 1
    total = len(headings)
    return {name: counts[name] / total * 100.0 for name in CANONICAL_SECTIONS}


# --- report assembly ------------------------------------------------------------

@dataclass
class ReportBundle:
    """Everything the final report can carry; all sections optional."""

    prf: dict | None = None
    per_file_counts: list[dict] = field(default_factory=list)
    alignment_rate: float | None = None
    coverage: dict[str, float] | None = None
    diversity: dict[str, float] | None = None  # label -> H
    judge_stats: dict[str, tuple[float, float]] | None = None  # label -> (mean, std)
    section_distribution: dict[str, float] | None = None
    usage: dict[str, list[dict]] | None = None  # condition label -> summary rows
    usage_meta: dict[str, dict] | None = None  # condition label -> {task, model, hil}


def report(bundle: ReportBundle) -> dict:
    """Assemble the machine-readable report plus flat plot-data tables."""
    doc = {
        "prf": bundle.prf or {},
        "per_file_counts": list(bundle.per_file_counts),
        "alignment_rate": bundle.alignment_rate,
        "coverage": bundle.coverage or {},
        "diversity": bundle.diversity or {},
        "judge_stats": {
            label: {"mean": mean, "std": std} for label, (mean, std) in (bundle.judge_stats or {}).items()
        },
        "section_distribution": bundle.section_distribution or {},
        "usage": bundle.usage or {},
        "plots": _plot_tables(bundle),
    }
    return doc


def _plot_tables(bundle: ReportBundle) -> dict:
    rows = []
    meta = bundle.usage_meta or {}
    for label, summaries in sorted((bundle.usage or {}).items()):
        info = meta.get(label, {})
        for row in summaries:
            rows.append(
                {
                    "condition": label,
                    "task": info.get("task"),
                    "model": info.get("model", row.get("group")),
                    "hil": info.get("hil"),
                    "group": row.get("group"),
                    "total_tokens": row.get("total_tokens"),
                    "total_cost": row.get("total_cost"),
                    "tokens_per_second": row.get("tokens_per_second"),
                }
            )
    tables: dict = {"cost_speed_tokens": rows}

    usage = bundle.usage or {}
    if {"hil", "non_hil"} <= set(usage):
        by_group_hil = {r["group"]: r for r in usage["hil"]}
        by_group_non = {r["group"]: r for r in usage["non_hil"]}
        pairs = []
        for group in sorted(set(by_group_hil) & set(by_group_non)):
            hil_cost = by_group_hil[group]["total_cost"]
            non_cost = by_group_non[group]["total_cost"]
            pairs.append(
                {
                    "group": group,
                    "hil_cost": hil_cost,
                    "non_hil_cost": non_cost,
                    "hil_cost_geq": hil_cost >= non_cost,
                }
            )
        tables["cost_pairs"] = pairs
    return tables


def usage_rows(ledger: UsageLedger, group_by: str = "model") -> list[dict]:
    """Convenience re-export so report assembly needs only this module."""
    return summarize_usage(ledger, group_by)
