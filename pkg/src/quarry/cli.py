"""Operator command line: thin composition of the engine's module operations.

Subcommands map one-to-one onto engine entry points (ingest, run, serve,
eval, replay, plus one subcommand per metric); no pipeline or metric logic
lives here. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
import threading
import time
from pathlib import Path

import click

from . import __version__
from .errors import QuarryError
from .gateway import HashingEmbedder, ModelRef, summarize_usage
from .metrics import (
    ConfusionCounts,
    ReportBundle,
    concept_alignment_rate,
    counts_from_review,
    detection_coverage,
    judge_stats,
    micro_average,
    prf,
    report,
    section_distribution,
    shannon_diversity,
)
from .ingest import parse_structured_article
from .ontology import OntologyStore, load_terms_jsonl
from .pipeline import RunStore, restore, run_to_completion, start_run
from .runtime import build_services, load_profiles, profiles_from_config
from .service import ServiceState, create_app, mount_ui
from .taskspec import load_task_spec

logger = logging.getLogger(__name__)


def domain_errors(fn):
    """Print structured cause and exit 1 on any domain error."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except QuarryError as e:
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            sys.exit(1)

    return wrapper


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise click.UsageError(f"--addr must be HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


@click.group()
@click.version_option(__version__)
@click.option("--log-level", default="WARNING", show_default=True, help="stderr logging level")
def main(log_level):
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, log_level.upper(), logging.WARNING))


@main.command("ingest")
@click.option("--terms", "terms_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--index", "index_path", required=True, type=click.Path(path_type=Path))
@click.option("--dim", default=256, show_default=True, help="hashing-embedder dimension")
@domain_errors
def cmd_ingest(terms_path, index_path, dim):
    """Embed a terms file and write the index snapshot."""
    terms = load_terms_jsonl(terms_path.read_bytes())
    hasher = HashingEmbedder(dim=dim)
    store = OntologyStore()
    count = store.ingest(terms, lambda texts: hasher.embed(ModelRef("scripted", "hash"), texts))
    store.save(index_path)
    click.echo(f"indexed {count} terms -> {index_path}")


@main.command("run")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--doc", "doc_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--profiles", "profiles_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--hil", is_flag=True, help="pause for human review over HTTP before finalizing")
@click.option("--out", "out_path", type=click.Path(path_type=Path), help="write FinalOutput here (default stdout)")
@click.option("--fixtures", "fixtures_dir", type=click.Path(exists=True, path_type=Path), help="scripted-provider fixture directory")
@click.option("--terms", "terms_path", type=click.Path(exists=True, path_type=Path), help="ontology terms to index at startup")
@click.option("--index", "index_path", type=click.Path(exists=True, path_type=Path), help="prebuilt index snapshot")
@click.option("--prices", "prices_path", type=click.Path(exists=True, path_type=Path), help="price table CSV")
@click.option("--addr", default="127.0.0.1:8732", show_default=True, help="review service address for --hil")
@click.option("--state-dir", type=click.Path(path_type=Path), help="persist run snapshots on every transition")
@click.option("--wait", default=600.0, show_default=True, help="seconds to wait for review in --hil mode")
@click.option("--run-id", default=None, help="override the derived run id")
@domain_errors
def cmd_run(spec_path, doc_path, profiles_path, hil, out_path, fixtures_dir, terms_path, index_path, prices_path, addr, state_dir, wait, run_id):
    """Run one extraction end to end; with --hil, host the review service."""
    spec = load_task_spec(spec_path)
    doc = parse_structured_article(doc_path.read_bytes())
    raw_profiles = load_profiles(profiles_path)
    run_store = RunStore(state_dir) if state_dir else None
    services = build_services(
        raw_profiles,
        fixtures_dir=fixtures_dir,
        prices_path=prices_path,
        terms_path=terms_path,
        index_path=index_path,
        run_store=run_store,
    )
    profiles = profiles_from_config(raw_profiles)
    from .pipeline import RunOptions

    options = RunOptions(hil_enabled=hil)
    run = start_run(spec, doc, profiles, options, run_id=run_id)

    if not hil:
        output = run_to_completion(run, services)
    else:
        output = _run_with_review(run, services, addr, wait)

    data = output.to_bytes()
    if out_path:
        out_path.write_bytes(data)
        click.echo(f"run {run.run_id} completed -> {out_path}", err=True)
    else:
        click.echo(data.decode("utf-8"), nl=False)
    for row in summarize_usage(services.gateway.ledger, group_by="agent_role"):
        tps = row["tokens_per_second"]
        logger.info(
            "usage %s: %d tokens, cost %.6f, %s tps",
            row["group"], row["total_tokens"], row["total_cost"], f"{tps:.2f}" if tps else "n/a",
        )


def _run_with_review(run, services, addr, wait):
    """Host the review service until this run's review completes."""
    import uvicorn

    host, port = parse_addr(addr)
    state = ServiceState(services, session_wait=wait)
    state.register(run)
    app = create_app(state)

    result: dict = {}

    def drive():
        try:
            result["output"] = run_to_completion(
                run, services, feedback_source=state._session_feedback_source()
            )
        except Exception as e:  # surfaced after the server stops
            result["error"] = e

    worker = threading.Thread(target=drive, name="quarry-run", daemon=True)
    worker.start()

    config = uvicorn.Config(app, host=host, port=port, log_level="warning")
    server = uvicorn.Server(config)

    def watchdog():
        while not run.is_terminal():
            time.sleep(0.1)
        worker.join(timeout=5)
        server.should_exit = True

    click.echo(f"run {run.run_id} paused for review at http://{host}:{port} (waiting up to {wait:.0f}s)", err=True)
    threading.Thread(target=watchdog, daemon=True).start()
    server.run()
    worker.join(timeout=5)

    if "error" in result:
        raise result["error"]
    return result["output"]


@main.command("serve")
@click.option("--addr", default="127.0.0.1:8732", show_default=True)
@click.option("--profiles", "profiles_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--fixtures", "fixtures_dir", type=click.Path(exists=True, path_type=Path))
@click.option("--terms", "terms_path", type=click.Path(exists=True, path_type=Path))
@click.option("--index", "index_path", type=click.Path(exists=True, path_type=Path))
@click.option("--prices", "prices_path", type=click.Path(exists=True, path_type=Path))
@click.option("--state-dir", type=click.Path(path_type=Path))
@click.option("--token", default=None, help="require this bearer token on every endpoint")
@click.option("--ui", "ui_dir", type=click.Path(path_type=Path), help="serve the review console build from this directory")
@click.option("--session-wait", default=600.0, show_default=True, help="seconds a paused run waits for review")
@domain_errors
def cmd_serve(addr, profiles_path, fixtures_dir, terms_path, index_path, prices_path, state_dir, token, ui_dir, session_wait):
    """Host the long-running review/run service."""
    import uvicorn

    host, port = parse_addr(addr)
    raw_profiles = load_profiles(profiles_path)
    services = build_services(
        raw_profiles,
        fixtures_dir=fixtures_dir,
        prices_path=prices_path,
        terms_path=terms_path,
        index_path=index_path,
        run_store=RunStore(state_dir) if state_dir else None,
    )
    state = ServiceState(services, default_profiles=raw_profiles, session_wait=session_wait, auth_token=token)
    app = create_app(state)
    if ui_dir:
        mount_ui(app, ui_dir)
    click.echo(f"serving on http://{host}:{port}", err=True)
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command("eval")
@click.option("--review", "review_paths", required=True, multiple=True, type=click.Path(exists=True, path_type=Path))
@click.option("--report", "report_path", required=True, type=click.Path(path_type=Path))
@domain_errors
def cmd_eval(review_paths, report_path):
    """Compute micro-averaged metrics over review files and write the report."""
    files = [p.read_bytes() for p in review_paths]
    per_file = []
    for path, data in zip(review_paths, files):
        counts = counts_from_review(data)
        p, r, f1 = prf(counts)
        per_file.append(
            {"file": str(path), "tp": counts.tp, "fp": counts.fp, "fn": counts.fn,
             "precision": p, "recall": r, "f1": f1}
        )
    bundle = ReportBundle(prf=micro_average(files), per_file_counts=per_file)
    doc = report(bundle)
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(f"report -> {report_path}")


@main.command("replay")
@click.option("--snapshot", "snapshot_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", type=click.Path(path_type=Path), help="write the payload JSON here")
@domain_errors
def cmd_replay(snapshot_path, out_path):
    """Restore a run snapshot and print its state."""
    run = restore(snapshot_path.read_bytes())
    items = getattr(run.payload, "items", getattr(run.payload, "records", ()))
    click.echo(
        json.dumps(
            {
                "run_id": run.run_id,
                "state": run.state,
                "task_id": run.spec.task_id,
                "document": run.document_ref,
                "items": len(items) if items is not None else 0,
                "history": run.history,
                "hil_applied": run.hil_applied,
                "failure_cause": run.failure_cause,
            },
            indent=2,
        )
    )
    if out_path and run.payload is not None:
        from .records import payload_to_dict

        out_path.write_text(json.dumps(payload_to_dict(run.payload), indent=2, sort_keys=True) + "\n")
        click.echo(f"payload -> {out_path}", err=True)


# --- metric subcommands ---------------------------------------------------------

@main.group("metric")
def metric_group():
    """One subcommand per evaluation metric."""


def _load_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


@metric_group.command("prf")
@click.option("--tp", required=True, type=int)
@click.option("--fp", required=True, type=int)
@click.option("--fn", required=True, type=int)
@domain_errors
def metric_prf(tp, fp, fn):
    p, r, f1 = prf(ConfusionCounts(tp, fp, fn))
    click.echo(json.dumps({"precision": p, "recall": r, "f1": f1}))


@metric_group.command("counts")
@click.option("--review", "review_path", required=True, type=click.Path(exists=True, path_type=Path))
@domain_errors
def metric_counts(review_path):
    counts = counts_from_review(review_path.read_bytes())
    click.echo(json.dumps({"tp": counts.tp, "fp": counts.fp, "fn": counts.fn}))


@metric_group.command("micro")
@click.option("--review", "review_paths", required=True, multiple=True, type=click.Path(exists=True, path_type=Path))
@domain_errors
def metric_micro(review_paths):
    click.echo(json.dumps(micro_average([p.read_bytes() for p in review_paths])))


@metric_group.command("alignment-rate")
@click.option("--predicted", required=True, type=click.Path(exists=True, path_type=Path), help="JSON list of [curie, label, ontology_name]")
@click.option("--gold", required=True, type=click.Path(exists=True, path_type=Path))
@domain_errors
def metric_alignment_rate(predicted, gold):
    rate = concept_alignment_rate(
        [tuple(row) for row in _load_json(predicted)],
        [tuple(row) for row in _load_json(gold)],
    )
    click.echo(json.dumps({"alignment_rate": rate}))


@metric_group.command("coverage")
@click.option("--entities", required=True, type=click.Path(exists=True, path_type=Path), help="JSON map model -> entity labels")
@domain_errors
def metric_coverage(entities):
    click.echo(json.dumps(detection_coverage(_load_json(entities))))


@metric_group.command("diversity")
@click.option("--counts", "counts_path", required=True, type=click.Path(exists=True, path_type=Path), help="JSON map entity_type -> count")
@domain_errors
def metric_diversity(counts_path):
    click.echo(json.dumps({"shannon_h": shannon_diversity(_load_json(counts_path))}))


@metric_group.command("judge-stats")
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True, path_type=Path), help="JSON list of scores")
@domain_errors
def metric_judge_stats(scores_path):
    mean, std = judge_stats(_load_json(scores_path))
    click.echo(json.dumps({"mean": mean, "std": std}))


@metric_group.command("section-dist")
@click.option("--headings", "headings_path", required=True, type=click.Path(exists=True, path_type=Path), help="JSON list of section headings")
@domain_errors
def metric_section_dist(headings_path):
    click.echo(json.dumps(section_distribution(_load_json(headings_path))))


@metric_group.command("usage")
@click.option("--events", "events_path", required=True, type=click.Path(exists=True, path_type=Path), help="JSON list of usage events")
@click.option("--group-by", default="run", show_default=True, type=click.Choice(["run", "agent_role", "model"]))
@domain_errors
def metric_usage(events_path, group_by):
    from .gateway import UsageEvent, UsageLedger

    ledger = UsageLedger()
    for e in _load_json(events_path):
        ledger.append(UsageEvent(**e))
    click.echo(json.dumps(summarize_usage(ledger, group_by=group_by)))


if __name__ == "__main__":
    main()
