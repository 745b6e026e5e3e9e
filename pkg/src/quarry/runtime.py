"""Engine assembly shared by the CLI, the HTTP service, and fixture tooling.

Translates profile/price/terms files into a wired Services value: gateway
with one provider per distinct provider name, ontology store, memory, and
the embedding model.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import yaml

from .demo import demo_chat_provider
from .errors import ConfigSchemaError, ConfigSyntaxError, MissingProfile
from .gateway import (
    Gateway,
    HashingEmbedder,
    HttpChatProvider,
    HttpEmbeddingProvider,
    ModelRef,
    PriceTable,
    UsageLedger,
)
from .memory import MemoryStore
from .ontology import OntologyStore, load_terms_jsonl
from .pipeline import AgentProfile, Services
from .taskspec import AGENT_ROLES

logger = logging.getLogger(__name__)

DEFAULT_EMBED_MODEL = ModelRef("scripted", "hash-256")


def load_profiles(source: bytes | str | Path) -> dict:
    """Parse the profiles file: one entry per agent role plus optional embedding."""
    if isinstance(source, Path):
        source = source.read_bytes()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        raw = yaml.safe_load(source)
    except yaml.YAMLError as e:
        raise ConfigSyntaxError(f"malformed profiles file: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigSyntaxError("profiles file must be a mapping")
    for role in AGENT_ROLES:
        if role not in raw:
            raise MissingProfile(role)
    return raw


def profiles_from_config(raw: dict) -> dict[str, AgentProfile]:
    profiles = {}
    for role in AGENT_ROLES:
        entry = raw[role]
        if not isinstance(entry, dict) or "model_name" not in entry or "provider" not in entry:
            raise ConfigSchemaError([f"{role}: needs provider and model_name"])
        profiles[role] = AgentProfile(
            agent_role=role,
            model=ModelRef(
                provider=entry["provider"],
                model_name=entry["model_name"],
                price_in=float(entry.get("price_in", 0.0)),
                price_out=float(entry.get("price_out", 0.0)),
            ),
            temperature=float(entry.get("temperature", 0.0)),
            max_output_tokens=int(entry.get("max_output_tokens", 2048)),
            credential_ref=entry.get("credential_ref"),
        )
    return profiles


def embed_model_from_config(raw: dict) -> ModelRef:
    entry = raw.get("embedding")
    if not entry:
        return DEFAULT_EMBED_MODEL
    return ModelRef(provider=entry["provider"], model_name=entry["model_name"])


def build_gateway(
    raw_profiles: dict,
    fixtures_dir: Path | None = None,
    prices_path: Path | None = None,
    cost_cap: float | None = None,
    ledger: UsageLedger | None = None,
) -> Gateway:
    """Instantiate one provider per distinct provider name in the profiles.

    The scripted provider replays fixtures/completions.json when present and
    falls back to the deterministic demo resolver, so offline runs work with
    or without a recorded fixture file.
    """
    entries = [raw_profiles[role] for role in AGENT_ROLES if isinstance(raw_profiles.get(role), dict)]
    if raw_profiles.get("embedding"):
        entries.append(raw_profiles["embedding"])

    chat_providers: dict[str, object] = {}
    embed_providers: dict[str, object] = {}
    for entry in entries:
        name = entry["provider"]
        if name in chat_providers:
            continue
        if name == "scripted":
            fixtures = None
            if fixtures_dir is not None:
                fixture_file = Path(fixtures_dir) / "completions.json"
                if fixture_file.exists():
                    fixtures = json.loads(fixture_file.read_text(encoding="utf-8"))
                else:
                    logger.warning("no completions.json under %s; using the demo resolver only", fixtures_dir)
            chat_providers[name] = demo_chat_provider(fixtures=fixtures)
            embed_providers[name] = HashingEmbedder(dim=int(entry.get("dim", 256)))
        else:
            base_url = entry.get("base_url")
            if not base_url:
                raise ConfigSchemaError([f"provider {name!r}: base_url required for HTTP providers"])
            chat_providers[name] = HttpChatProvider(
                base_url=base_url,
                path=entry.get("path", "/chat/completions"),
                credential_env=entry.get("credential_ref") or "QUARRY_API_KEY",
            )
            embed_providers[name] = HttpEmbeddingProvider(
                base_url=base_url,
                path=entry.get("embed_path", "/embeddings"),
                credential_env=entry.get("credential_ref") or "QUARRY_API_KEY",
            )
    # scripted embedding always available as the offline fallback
    embed_providers.setdefault("scripted", HashingEmbedder())

    prices = PriceTable.load(prices_path) if prices_path else PriceTable()
    return Gateway(
        chat_providers=chat_providers,
        embed_providers=embed_providers,
        ledger=ledger or UsageLedger(),
        prices=prices,
        cost_cap=cost_cap,
    )


def build_store(
    gateway: Gateway,
    embed_model: ModelRef,
    terms_path: Path | None = None,
    index_path: Path | None = None,
) -> OntologyStore:
    if index_path is not None and Path(index_path).exists():
        return OntologyStore.load(index_path)
    store = OntologyStore()
    if terms_path is not None:
        terms = load_terms_jsonl(Path(terms_path).read_bytes())
        store.ingest(terms, gateway.embedder(embed_model))
    return store


def build_services(
    raw_profiles: dict,
    fixtures_dir: Path | None = None,
    prices_path: Path | None = None,
    terms_path: Path | None = None,
    index_path: Path | None = None,
    cost_cap: float | None = None,
    run_store=None,
) -> Services:
    gateway = build_gateway(raw_profiles, fixtures_dir=fixtures_dir, prices_path=prices_path, cost_cap=cost_cap)
    embed_model = embed_model_from_config(raw_profiles)
    store = build_store(gateway, embed_model, terms_path=terms_path, index_path=index_path)
    return Services(
        gateway=gateway,
        store=store,
        memory=MemoryStore(),
        embed_model=embed_model,
        run_store=run_store,
    )
