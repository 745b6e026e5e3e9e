import json
from pathlib import Path

import pytest

from quarry.demo import demo_chat_provider
from quarry.gateway import Gateway, HashingEmbedder, ModelRef, UsageLedger
from quarry.ingest import parse_structured_article
from quarry.memory import MemoryStore
from quarry.ontology import OntologyStore, load_terms_jsonl
from quarry.pipeline import AgentProfile, RunOptions, Services
from quarry.taskspec import AGENT_ROLES, load_task_spec

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def slice_terms():
    return load_terms_jsonl(FIXTURES.joinpath("terms.jsonl").read_bytes())


@pytest.fixture()
def embedder():
    hasher = HashingEmbedder(dim=256)
    return lambda texts: hasher.embed(ModelRef("scripted", "hash-256"), texts)


@pytest.fixture()
def store(slice_terms, embedder):
    s = OntologyStore()
    s.ingest(slice_terms, embedder)
    return s


@pytest.fixture(scope="session")
def task_spec():
    return load_task_spec(FIXTURES / "task_ner.yaml")


@pytest.fixture(scope="session")
def article():
    return parse_structured_article(FIXTURES.joinpath("article.json").read_bytes())


def make_profiles() -> dict[str, AgentProfile]:
    prices = {"price_in": 3.0, "price_out": 15.0}
    return {
        role: AgentProfile(
            agent_role=role,
            model=ModelRef("scripted", f"demo-{role}", **prices),
            temperature=0.0,
            max_output_tokens=2048,
        )
        for role in AGENT_ROLES
    }


@pytest.fixture()
def profiles():
    return make_profiles()


def make_services(store, fixtures: dict | None = None, resolver=None, record: dict | None = None) -> Services:
    """Services wired to the scripted demo provider (or a custom resolver)."""
    if resolver is not None:
        from quarry.gateway import ScriptedChatProvider

        chat = ScriptedChatProvider(fixtures=fixtures, resolver=resolver, record=record)
    else:
        chat = demo_chat_provider(fixtures=fixtures, record=record)
    gateway = Gateway(
        chat_providers={"scripted": chat},
        embed_providers={"scripted": HashingEmbedder(dim=256)},
        ledger=UsageLedger(),
    )
    return Services(
        gateway=gateway,
        store=store,
        memory=MemoryStore(),
        embed_model=ModelRef("scripted", "hash-256"),
    )


@pytest.fixture()
def services(store):
    return make_services(store)


@pytest.fixture()
def options():
    return RunOptions(hil_enabled=False)


@pytest.fixture()
def hil_options():
    return RunOptions(hil_enabled=True, max_feedback_rounds=2)


def load_fixture_json(name: str):
    return json.loads(FIXTURES.joinpath(name).read_text(encoding="utf-8"))
