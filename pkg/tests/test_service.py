import json
import time

import pytest
import yaml
from fastapi.testclient import TestClient

from quarry.metrics import counts_from_review
from quarry.service import ServiceState, create_app

from conftest import FIXTURES, make_services


def wait_until(predicate, timeout=10.0, interval=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError("condition not met in time")


@pytest.fixture()
def raw_profiles():
    return yaml.safe_load(FIXTURES.joinpath("profiles.yaml").read_text())


@pytest.fixture()
def client(store, raw_profiles):
    state = ServiceState(
        make_services(store), default_profiles=raw_profiles, poll_interval=0.01, session_wait=30.0
    )
    app = create_app(state)
    with TestClient(app) as c:  # exiting the block shuts the engine down
        c.engine_state = state
        yield c


def run_request(hil=False, run_id=None):
    task = yaml.safe_load(FIXTURES.joinpath("task_ner.yaml").read_text())
    document = json.loads(FIXTURES.joinpath("article.json").read_text())
    return {
        "task": task,
        "document": document,
        "options": {"hil_enabled": hil},
        "run_id": run_id,
    }


class TestRunEndpoints:
    def test_non_hil_run_completes(self, client):
        created = client.post("/runs", json=run_request(run_id="svc-1"))
        assert created.status_code == 201
        assert created.json()["state"] == "created"

        def completed():
            body = client.get("/runs/svc-1").json()
            return body if body["state"] == "completed" else None

        status = wait_until(completed)
        assert status["hil_applied"] is False

        output = client.get("/runs/svc-1/output")
        assert output.status_code == 200
        doc = output.json()
        assert set(doc) == {"run_id", "records", "judge_summary", "provenance", "hil_applied"}
        assert doc["records"]

    def test_output_before_completion_conflicts(self, client):
        client.post("/runs", json=run_request(hil=True, run_id="svc-2"))
        wait_until(lambda: client.get("/runs/svc-2").json()["state"] == "awaiting_human_feedback")
        assert client.get("/runs/svc-2/output").status_code == 409

    def test_unknown_run_404(self, client):
        assert client.get("/runs/ghost").status_code == 404

    def test_duplicate_run_id_conflicts(self, client):
        client.post("/runs", json=run_request(run_id="svc-dup"))
        second = client.post("/runs", json=run_request(run_id="svc-dup"))
        assert second.status_code == 409

    def test_bad_options_422(self, client):
        body = run_request()
        body["options"] = {"verbosity": 11}
        assert client.post("/runs", json=body).status_code == 422


class TestSessionEndpoints:
    def start_paused(self, client, run_id):
        client.post("/runs", json=run_request(hil=True, run_id=run_id))
        session = wait_until(
            lambda: next(
                (s for s in client.get("/sessions", params={"status": "open"}).json()["sessions"] if s["run_id"] == run_id),
                None,
            )
        )
        return session

    def test_full_review_cycle_with_correction(self, client):
        summary = self.start_paused(client, "svc-hil")
        assert summary["item_count"] >= 1

        detail = client.get(f"/sessions/{summary['session_id']}").json()
        assert detail["items"][0]["verdict"] == "unreviewed"

        first = detail["items"][0]["item_id"]
        decisions = {
            "decisions": [
                {"item_id": first, "verdict": "incorrect", "corrected_value": {"label": "corrected brain term"}}
            ]
            + [{"item_id": i["item_id"], "verdict": "correct"} for i in detail["items"][1:]]
        }
        posted = client.post(f"/sessions/{summary['session_id']}/decisions", json=decisions)
        assert posted.status_code == 200
        assert posted.json()["reviewed"] == len(detail["items"])

        # draft survives refresh: re-fetch shows saved verdicts
        refetched = client.get(f"/sessions/{summary['session_id']}").json()
        assert refetched["items"][0]["verdict"] == "incorrect"

        submitted = client.post(f"/sessions/{summary['session_id']}/submit", json={})
        assert submitted.status_code == 200
        assert submitted.json()["run_state"] == "completed"

        output = client.get("/runs/svc-hil/output").json()
        assert output["hil_applied"] is True
        assert output["records"][0]["label"] == "corrected brain term"

    def test_submit_with_unreviewed_blocked_then_remainder(self, client):
        summary = self.start_paused(client, "svc-block")
        sid = summary["session_id"]
        assert client.post(f"/sessions/{sid}/submit", json={}).status_code == 409
        ok = client.post(f"/sessions/{sid}/submit", json={"approve_remainder": True})
        assert ok.status_code == 200

    def test_double_submit_conflicts(self, client):
        summary = self.start_paused(client, "svc-twice")
        sid = summary["session_id"]
        client.post(f"/sessions/{sid}/submit", json={"approve_remainder": True})
        again = client.post(f"/sessions/{sid}/submit", json={"approve_remainder": True})
        assert again.status_code == 409

    def test_decision_on_unknown_item_404(self, client):
        summary = self.start_paused(client, "svc-unknown-item")
        resp = client.post(
            f"/sessions/{summary['session_id']}/decisions",
            json={"decisions": [{"item_id": "ghost", "verdict": "correct"}]},
        )
        assert resp.status_code == 404

    def test_export_roundtrips_through_metrics(self, client):
        summary = self.start_paused(client, "svc-export")
        sid = summary["session_id"]
        assert client.get(f"/sessions/{sid}/export").status_code == 409  # still open
        client.post(f"/sessions/{sid}/submit", json={"approve_remainder": True})
        exported = client.get(f"/sessions/{sid}/export")
        assert exported.status_code == 200
        assert exported.headers["content-type"].startswith("text/csv")
        counts = counts_from_review(exported.content)
        assert counts.tp == summary["item_count"]
        assert (counts.fp, counts.fn) == (0, 0)

    def test_unknown_session_404(self, client):
        assert client.get("/sessions/nope").status_code == 404


class TestAuth:
    def test_token_required_when_configured(self, store, raw_profiles):
        state = ServiceState(make_services(store), default_profiles=raw_profiles, auth_token="sekrit")
        with TestClient(create_app(state)) as client:
            assert client.get("/sessions").status_code == 401
            ok = client.get("/sessions", headers={"Authorization": "Bearer sekrit"})
            assert ok.status_code == 200
        # health stays open for probes
            assert client.get("/healthz").status_code == 200


def test_healthz(client):
    body = client.get("/healthz").json()
    assert body["status"] == "ok"


class TestConcurrentRuns:
    def test_independent_runs_complete_in_parallel(self, client):
        ids = [f"conc-{i}" for i in range(4)]
        for rid in ids:
            assert client.post("/runs", json=run_request(run_id=rid)).status_code == 201

        def all_done():
            states = {rid: client.get(f"/runs/{rid}").json()["state"] for rid in ids}
            return states if all(s == "completed" for s in states.values()) else None

        wait_until(all_done, timeout=20)
        outputs = {rid: client.get(f"/runs/{rid}/output").json() for rid in ids}
        # every run produced its own output under its own id
        for rid, doc in outputs.items():
            assert doc["run_id"] == rid
            assert doc["records"]
