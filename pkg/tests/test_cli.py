import json
import socket
import subprocess
import sys
import threading
import time
from pathlib import Path

import pytest
from click.testing import CliRunner

from quarry.cli import main

from conftest import FIXTURES

REVIEWS = FIXTURES / "reviews"


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


class TestRunCommand:
    def test_non_hil_run_writes_final_output(self, runner, tmp_path):
        out = tmp_path / "out.json"
        result = invoke(
            runner, "run",
            "--spec", FIXTURES / "task_ner.yaml",
            "--doc", FIXTURES / "article.json",
            "--profiles", FIXTURES / "profiles.yaml",
            "--fixtures", FIXTURES,
            "--terms", FIXTURES / "terms.jsonl",
            "--out", out,
        )
        assert result.exit_code == 0, result.output
        doc = json.loads(out.read_text())
        assert set(doc) == {"run_id", "records", "judge_summary", "provenance", "hil_applied"}
        assert doc["hil_applied"] is False
        assert doc["records"]

    def test_missing_spec_is_usage_error(self, runner):
        result = runner.invoke(
            main,
            ["run", "--doc", str(FIXTURES / "article.json"), "--profiles", str(FIXTURES / "profiles.yaml")],
        )
        assert result.exit_code == 2

    def test_unparseable_spec_is_domain_error(self, runner, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("task_id: [unclosed")
        result = runner.invoke(
            main,
            ["run", "--spec", str(bad), "--doc", str(FIXTURES / "article.json"),
             "--profiles", str(FIXTURES / "profiles.yaml"), "--terms", str(FIXTURES / "terms.jsonl")],
        )
        assert result.exit_code == 1
        assert "error:" in result.output or result.stderr_bytes

    def test_state_dir_records_snapshots_and_replay_reads_them(self, runner, tmp_path):
        state_dir = tmp_path / "state"
        out = tmp_path / "out.json"
        result = invoke(
            runner, "run",
            "--spec", FIXTURES / "task_ner.yaml",
            "--doc", FIXTURES / "article.json",
            "--profiles", FIXTURES / "profiles.yaml",
            "--terms", FIXTURES / "terms.jsonl",
            "--state-dir", state_dir, "--out", out, "--run-id", "cli-run",
        )
        assert result.exit_code == 0
        snapshot = state_dir / "cli-run.ssrun"
        assert snapshot.exists()

        replay = invoke(runner, "replay", "--snapshot", snapshot)
        assert replay.exit_code == 0
        info = json.loads(replay.output)
        assert info["run_id"] == "cli-run"
        assert info["state"] == "completed"

    def test_replay_on_corrupt_snapshot_fails_cleanly(self, runner, tmp_path):
        bad = tmp_path / "bad.ssrun"
        bad.write_bytes(b"garbage")
        result = runner.invoke(main, ["replay", "--snapshot", str(bad)])
        assert result.exit_code == 1


class TestIngestCommand:
    def test_ingest_then_run_with_index(self, runner, tmp_path):
        index = tmp_path / "slice.ssidx"
        result = invoke(runner, "ingest", "--terms", FIXTURES / "terms.jsonl", "--index", index)
        assert result.exit_code == 0
        assert "indexed 10 terms" in result.output
        assert index.read_bytes()[:5] == b"SSIDX"

        out = tmp_path / "out.json"
        run = invoke(
            runner, "run",
            "--spec", FIXTURES / "task_ner.yaml",
            "--doc", FIXTURES / "article.json",
            "--profiles", FIXTURES / "profiles.yaml",
            "--index", index, "--out", out,
        )
        assert run.exit_code == 0


class TestEvalCommand:
    def test_schema_extraction_table_reproduced(self, runner, tmp_path):
        report_path = tmp_path / "report.json"
        result = invoke(
            runner, "eval",
            "--review", REVIEWS / "mfq_claude_hil.csv",
            "--review", REVIEWS / "mfq_gpt4omini_hil.csv",
            "--review", REVIEWS / "mfq_deepseek_hil.csv",
            "--review", REVIEWS / "mfq_deepseek_nonhil.csv",
            "--report", report_path,
        )
        assert result.exit_code == 0
        doc = json.loads(report_path.read_text())

        tol = 0.005 + 1e-9
        by_file = {Path(row["file"]).name: row for row in doc["per_file_counts"]}
        expected = {
            "mfq_claude_hil.csv": (1.00, 1.00, 1.00),
            "mfq_gpt4omini_hil.csv": (1.00, 0.87, 0.93),
            "mfq_deepseek_hil.csv": (1.00, 0.23, 0.38),
            "mfq_deepseek_nonhil.csv": (1.00, 0.18, 0.30),
        }
        for name, (p, r, f1) in expected.items():
            row = by_file[name]
            assert row["precision"] == pytest.approx(p, abs=tol)
            assert row["recall"] == pytest.approx(r, abs=tol)
            assert row["f1"] == pytest.approx(f1, abs=tol)
        # micro average pools all four files
        assert doc["prf"]["tp"] == 39 + 34 + 9 + 7

    def test_eval_requires_review_flag(self, runner, tmp_path):
        result = runner.invoke(main, ["eval", "--report", str(tmp_path / "r.json")])
        assert result.exit_code == 2


class TestMetricSubcommands:
    def test_prf(self, runner):
        result = invoke(runner, "metric", "prf", "--tp", 34, "--fp", 0, "--fn", 5)
        body = json.loads(result.output)
        assert body["recall"] == pytest.approx(34 / 39)

    def test_counts(self, runner):
        result = invoke(runner, "metric", "counts", "--review", REVIEWS / "mfq_deepseek_hil.csv")
        assert json.loads(result.output) == {"tp": 9, "fp": 0, "fn": 30}

    def test_diversity(self, runner, tmp_path):
        counts = tmp_path / "counts.json"
        counts.write_text(json.dumps({"a": 5, "b": 5}))
        result = invoke(runner, "metric", "diversity", "--counts", counts)
        assert json.loads(result.output)["shannon_h"] == pytest.approx(0.6931, abs=1e-4)

    def test_alignment_rate(self, runner, tmp_path):
        gold = [["NCBITaxon:7898", "Actinopterygii", "NCBI Taxonomy"]] * 24
        predicted = gold[:22] + [["NCBITaxon:1", "x", "y"]] * 2
        (tmp_path / "gold.json").write_text(json.dumps(gold))
        (tmp_path / "pred.json").write_text(json.dumps(predicted))
        result = invoke(
            runner, "metric", "alignment-rate",
            "--predicted", tmp_path / "pred.json", "--gold", tmp_path / "gold.json",
        )
        assert json.loads(result.output)["alignment_rate"] == pytest.approx(91.6667, abs=1e-4)

    def test_judge_stats(self, runner, tmp_path):
        scores = tmp_path / "scores.json"
        scores.write_text(json.dumps([0.955] + [1.0] * 8))
        result = invoke(runner, "metric", "judge-stats", "--scores", scores)
        body = json.loads(result.output)
        assert body == {"mean": pytest.approx(0.995), "std": pytest.approx(0.015)}

    def test_usage(self, runner, tmp_path):
        events = tmp_path / "events.json"
        events.write_text(
            json.dumps(
                [
                    {"run_id": "r", "agent_role": "judge", "provider": "p", "model_name": "m",
                     "input_tokens": 10, "output_tokens": 1565, "latency": 20.0, "cost": 0.01}
                ]
            )
        )
        result = invoke(runner, "metric", "usage", "--events", events, "--group-by", "model")
        (row,) = json.loads(result.output)
        assert row["tokens_per_second"] == pytest.approx(78.25)

    def test_section_dist(self, runner, tmp_path):
        headings = tmp_path / "headings.json"
        headings.write_text(json.dumps(["Results"] * 51 + ["Methods"] * 44))
        result = invoke(runner, "metric", "section-dist", "--headings", headings)
        assert json.loads(result.output)["Results"] == pytest.approx(53.68, abs=0.005)


class TestFixtureFile:
    def test_committed_completions_match_regeneration(self, tmp_path):
        """Prompt assets or demo rules changed? Regenerate fixtures/completions.json."""
        import shutil

        work = tmp_path / "fixtures"
        work.mkdir()
        for name in ("task_ner.yaml", "article.json", "profiles.yaml", "terms.jsonl"):
            shutil.copy(FIXTURES / name, work / name)
        script = FIXTURES.parent / "scripts" / "build_demo_fixtures.py"
        subprocess.run([sys.executable, str(script), str(work)], check=True, capture_output=True)
        regenerated = json.loads((work / "completions.json").read_text())
        committed = json.loads((FIXTURES / "completions.json").read_text())
        assert regenerated == committed

    def test_fixture_replay_without_resolver(self):
        """The recorded digests alone drive a full run (no rule fallback)."""
        from quarry.gateway import Gateway, HashingEmbedder, ScriptedChatProvider, UsageLedger
        from quarry.ingest import parse_structured_article
        from quarry.memory import MemoryStore
        from quarry.ontology import OntologyStore, load_terms_jsonl
        from quarry.pipeline import RunOptions, Services, run_to_completion, start_run
        from quarry.runtime import load_profiles, profiles_from_config
        from quarry.taskspec import load_task_spec

        fixtures = json.loads((FIXTURES / "completions.json").read_text())
        provider = ScriptedChatProvider(fixtures=fixtures)  # resolver deliberately absent
        gateway = Gateway(chat_providers={"scripted": provider}, embed_providers={"scripted": HashingEmbedder()}, ledger=UsageLedger())
        store = OntologyStore()
        embed = gateway.embedder(__import__("quarry.gateway", fromlist=["ModelRef"]).ModelRef("scripted", "hash-256"))
        store.ingest(load_terms_jsonl((FIXTURES / "terms.jsonl").read_bytes()), embed)
        services = Services(gateway=gateway, store=store, memory=MemoryStore(),
                            embed_model=__import__("quarry.gateway", fromlist=["ModelRef"]).ModelRef("scripted", "hash-256"))

        spec = load_task_spec(FIXTURES / "task_ner.yaml")
        doc = parse_structured_article((FIXTURES / "article.json").read_bytes())
        profiles = profiles_from_config(load_profiles(FIXTURES / "profiles.yaml"))
        run = start_run(spec, doc, profiles, RunOptions())
        output = run_to_completion(run, services)
        assert output.records


def free_port() -> int:
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    return port


class TestHilOverHttp:
    def test_run_hil_review_cycle(self, tmp_path):
        """`run --hil` pauses, serves the review API, resumes on submit."""
        import httpx

        port = free_port()
        out = tmp_path / "out.json"
        runner = CliRunner()
        result_holder = {}

        def drive_cli():
            result_holder["result"] = runner.invoke(
                main,
                [
                    "run",
                    "--spec", str(FIXTURES / "task_ner.yaml"),
                    "--doc", str(FIXTURES / "article.json"),
                    "--profiles", str(FIXTURES / "profiles.yaml"),
                    "--terms", str(FIXTURES / "terms.jsonl"),
                    "--hil", "--addr", f"127.0.0.1:{port}",
                    "--wait", "30", "--out", str(out),
                ],
                catch_exceptions=False,
            )

        thread = threading.Thread(target=drive_cli, daemon=True)
        thread.start()

        base = f"http://127.0.0.1:{port}"
        deadline = time.monotonic() + 20
        session = None
        while time.monotonic() < deadline and session is None:
            try:
                body = httpx.get(f"{base}/sessions", params={"status": "open"}, timeout=2).json()
                sessions = body["sessions"]
                session = sessions[0] if sessions else None
            except Exception:
                pass
            if session is None:
                time.sleep(0.1)
        assert session is not None, "review session never opened"

        detail = httpx.get(f"{base}/sessions/{session['session_id']}", timeout=5).json()
        first = detail["items"][0]["item_id"]
        httpx.post(
            f"{base}/sessions/{session['session_id']}/decisions",
            json={"decisions": [{"item_id": first, "verdict": "incorrect", "corrected_value": {"label": "reviewed label"}}]},
            timeout=5,
        ).raise_for_status()
        httpx.post(
            f"{base}/sessions/{session['session_id']}/submit",
            json={"approve_remainder": True},
            timeout=15,
        ).raise_for_status()

        thread.join(timeout=30)
        assert not thread.is_alive(), "CLI did not exit after review"
        assert result_holder["result"].exit_code == 0
        doc = json.loads(out.read_text())
        assert doc["hil_applied"] is True
        assert doc["records"][0]["label"] == "reviewed label"
