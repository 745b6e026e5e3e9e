#!/usr/bin/env python3
"""Record the offline demo's scripted completions into completions.json.

Runs the demo pipeline once (non-HIL and HIL-with-approval) against the
deterministic rule-based resolver, capturing every completion keyed by
request digest. The resulting file lets `quarry run --fixtures DIR` replay
the exact same runs by digest lookup alone.

Usage: python scripts/build_demo_fixtures.py [FIXTURES_DIR]
"""

import json
import sys
from pathlib import Path

from quarry.ingest import parse_structured_article
from quarry.pipeline import RunOptions, run_to_completion, start_run
from quarry.records import HumanFeedback
from quarry.runtime import build_services, load_profiles, profiles_from_config
from quarry.taskspec import load_task_spec


def build(fixtures_dir: Path) -> Path:
    spec = load_task_spec(fixtures_dir / "task_ner.yaml")
    doc = parse_structured_article((fixtures_dir / "article.json").read_bytes())
    raw_profiles = load_profiles(fixtures_dir / "profiles.yaml")
    profiles = profiles_from_config(raw_profiles)

    record: dict = {}
    for options, source in [
        (RunOptions(hil_enabled=False), None),
        (RunOptions(hil_enabled=True), lambda run: HumanFeedback(approve=True)),
    ]:
        services = build_services(raw_profiles, terms_path=fixtures_dir / "terms.jsonl")
        services.gateway.chat_providers["scripted"].record = record
        run = start_run(spec, doc, profiles, options)
        run_to_completion(run, services, feedback_source=source)

    out = fixtures_dir / "completions.json"
    out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"recorded {len(record)} completions -> {out}")
    return out


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "fixtures"
    build(target)
