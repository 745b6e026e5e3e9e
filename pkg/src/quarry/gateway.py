"""Uniform access to chat-completion and embedding models.

The Gateway routes requests to providers registered by name, records every
completion in an append-only usage ledger (tokens, latency, cost), and
enforces an optional per-run cost cap. Scripted providers replay fixture
completions keyed by a request digest so whole pipeline runs are
reproducible offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import (
    BudgetExceeded,
    DimensionMismatch,
    FixtureMissing,
    ProviderError,
    TransportError,
)

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 120.0
DEFAULT_RETRIES = 3


@dataclass(frozen=True)
class ModelRef:
    provider: str
    model_name: str
    price_in: float = 0.0   # currency per 1M input tokens
    price_out: float = 0.0  # currency per 1M output tokens

    def __post_init__(self):
        if self.price_in < 0 or self.price_out < 0:
            raise ValueError("prices must be >= 0")


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class Completion:
    text: str
    input_tokens: int
    output_tokens: int
    latency: float
    model: ModelRef

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be >= 0")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")


def request_digest(model_name: str, messages: list[dict], temperature: float) -> str:
    """Stable fixture key: hash of model name, messages, and temperature."""
    payload = json.dumps(
        [model_name, [[m["role"], m["content"]] for m in messages], round(float(temperature), 6)],
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def approx_token_count(text: str) -> int:
    return len(text.split())


# --- usage ledger -----------------------------------------------------------

@dataclass(frozen=True)
class UsageEvent:
    run_id: str
    agent_role: str
    provider: str
    model_name: str
    input_tokens: int
    output_tokens: int
    latency: float
    cost: float

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "agent_role": self.agent_role,
            "provider": self.provider,
            "model_name": self.model_name,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "latency": self.latency,
            "cost": self.cost,
        }


def event_cost(input_tokens: int, output_tokens: int, model: ModelRef) -> float:
    return input_tokens * model.price_in / 1e6 + output_tokens * model.price_out / 1e6


class UsageLedger:
    """Append-only record of gateway usage; appends are atomic."""

    def __init__(self):
        self._events: list[UsageEvent] = []
        self._lock = threading.Lock()

    def append(self, event: UsageEvent) -> None:
        with self._lock:
            self._events.append(event)

    def events(self) -> list[UsageEvent]:
        with self._lock:
            return list(self._events)

    def run_cost(self, run_id: str) -> float:
        return sum(e.cost for e in self.events() if e.run_id == run_id)

    def __len__(self) -> int:
        return len(self._events)


_GROUP_KEYS = {
    "run": lambda e: e.run_id,
    "agent_role": lambda e: e.agent_role,
    "model": lambda e: e.model_name,
}


def summarize_usage(ledger: UsageLedger, group_by: str = "run") -> list[dict]:
    """Aggregate ledger events per group.

    tokens_per_second is total output tokens over total latency; groups with
    zero accumulated latency report None rather than raising.
    """
    try:
        keyfn = _GROUP_KEYS[group_by]
    except KeyError:
        raise ValueError(f"group_by must be one of {sorted(_GROUP_KEYS)}") from None

    groups: dict[str, list[UsageEvent]] = {}
    for event in ledger.events():
        groups.setdefault(keyfn(event), []).append(event)

    rows = []
    for key in sorted(groups):
        events = groups[key]
        out_tokens = sum(e.output_tokens for e in events)
        in_tokens = sum(e.input_tokens for e in events)
        latency = sum(e.latency for e in events)
        rows.append(
            {
                "group": key,
                "input_tokens": in_tokens,
                "output_tokens": out_tokens,
                "total_tokens": in_tokens + out_tokens,
                "total_cost": sum(e.cost for e in events),
                "latency": latency,
                "tokens_per_second": (out_tokens / latency) if latency > 0 else None,
            }
        )
    return rows


# --- price table ------------------------------------------------------------

class PriceTable:
    """Prices per (provider, model_name), loaded from a CSV file."""

    def __init__(self, rows: dict[tuple[str, str], tuple[float, float]] | None = None):
        self._rows = dict(rows or {})

    @classmethod
    def load(cls, path) -> "PriceTable":
        rows: dict[tuple[str, str], tuple[float, float]] = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = [p.strip() for p in line.split(",")]
                if parts[:4] == ["provider", "model_name", "price_in", "price_out"]:
                    continue  # optional header
                if len(parts) != 4:
                    raise ValueError(f"price table line {line_no}: expected 4 columns")
                rows[(parts[0], parts[1])] = (float(parts[2]), float(parts[3]))
        return cls(rows)

    def apply(self, model: ModelRef) -> ModelRef:
        prices = self._rows.get((model.provider, model.model_name))
        if prices is None:
            return model
        return ModelRef(model.provider, model.model_name, price_in=prices[0], price_out=prices[1])


# --- providers --------------------------------------------------------------

class ScriptedChatProvider:
    """Deterministic chat provider for tests and offline demo runs.

    Completions are looked up by request digest in a fixtures mapping. A
    pure `resolver(model, messages, decoding) -> str` may back unmapped
    digests (used to generate fixture files); every served completion can be
    recorded so a run's full fixture set is capturable.
    """

    def __init__(self, fixtures: dict[str, dict] | None = None, resolver=None, latency: float = 0.5, record: dict | None = None):
        self.fixtures = dict(fixtures or {})
        self.resolver = resolver
        self.latency = latency
        self.record = record

    def complete(self, model: ModelRef, messages: list[dict], decoding: Decoding) -> Completion:
        digest = request_digest(model.model_name, messages, decoding.temperature)
        entry = self.fixtures.get(digest)
        if entry is None and self.resolver is not None:
            text = self.resolver(model, messages, decoding)
            entry = {"text": text}
        if entry is None:
            raise FixtureMissing(digest, messages[-1]["content"] if messages else "")
        text = entry["text"]
        input_tokens = entry.get("input_tokens", sum(approx_token_count(m["content"]) for m in messages))
        output_tokens = entry.get("output_tokens", approx_token_count(text))
        latency = entry.get("latency", self.latency)
        if self.record is not None:
            self.record[digest] = {
                "text": text,
                "input_tokens": input_tokens,
                "output_tokens": output_tokens,
                "latency": latency,
            }
        return Completion(text, input_tokens, output_tokens, latency, model)

    @classmethod
    def from_fixture_file(cls, path) -> "ScriptedChatProvider":
        with open(path, encoding="utf-8") as fh:
            return cls(fixtures=json.load(fh))


class HttpChatProvider:
    """OpenAI-style chat-completions endpoint with bearer-token auth.

    The base URL and path are configuration, not constants; credentials are
    read from the environment via credential_env.
    """

    def __init__(self, base_url: str, path: str = "/chat/completions", credential_env: str = "QUARRY_API_KEY", timeout: float = DEFAULT_TIMEOUT):
        self.base_url = base_url.rstrip("/")
        self.path = path
        self.credential_env = credential_env
        self.timeout = timeout

    def complete(self, model: ModelRef, messages: list[dict], decoding: Decoding) -> Completion:
        import httpx

        key = os.environ.get(self.credential_env, "")
        started = time.monotonic()
        try:
            resp = httpx.post(
                self.base_url + self.path,
                headers={"Authorization": f"Bearer {key}"},
                json={
                    "model": model.model_name,
                    "messages": messages,
                    "temperature": decoding.temperature,
                    "max_tokens": decoding.max_output_tokens,
                },
                timeout=self.timeout,
            )
        except httpx.HTTPError as e:
            raise TransportError(str(e)) from e
        latency = time.monotonic() - started
        if resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProviderError(resp.status_code, resp.text)
        body = resp.json()
        usage = body.get("usage", {})
        text = body["choices"][0]["message"]["content"]
        return Completion(
            text=text,
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", approx_token_count(text))),
            latency=latency,
            model=model,
        )


class HashingEmbedder:
    """Deterministic bag-of-words feature-hashing embedder.

    Tokens are hashed (sha1, stable across processes) into a fixed number of
    signed buckets and the result is L2-normalized. Texts sharing tokens get
    geometrically close vectors, which is exactly what scripted retrieval
    tests need; it also serves as an offline fallback embedder.
    """

    def __init__(self, dim: int = 256):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim

    def embed(self, model: ModelRef, texts: list[str]) -> list[list[float]]:
        return [self._one(t) for t in texts]

    def _one(self, text: str) -> list[float]:
        tokens = [t for t in _tokenize(text)]
        if not tokens:
            tokens = [text.strip() or "∅"]
        vec = np.zeros(self.dim)
        for tok in tokens:
            h = hashlib.sha1(tok.encode("utf-8")).digest()
            idx = int.from_bytes(h[:4], "big") % self.dim
            sign = 1.0 if h[4] % 2 == 0 else -1.0
            vec[idx] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec[0] = 1.0
            norm = 1.0
        return (vec / norm).tolist()


def _tokenize(text: str) -> list[str]:
    out = []
    word = []
    for ch in text.lower():
        if ch.isalnum():
            word.append(ch)
        elif word:
            out.append("".join(word))
            word = []
    if word:
        out.append("".join(word))
    return out


class HttpEmbeddingProvider:
    """OpenAI-style embeddings endpoint."""

    def __init__(self, base_url: str, path: str = "/embeddings", credential_env: str = "QUARRY_API_KEY", timeout: float = DEFAULT_TIMEOUT):
        self.base_url = base_url.rstrip("/")
        self.path = path
        self.credential_env = credential_env
        self.timeout = timeout

    def embed(self, model: ModelRef, texts: list[str]) -> list[list[float]]:
        import httpx

        key = os.environ.get(self.credential_env, "")
        try:
            resp = httpx.post(
                self.base_url + self.path,
                headers={"Authorization": f"Bearer {key}"},
                json={"model": model.model_name, "input": texts},
                timeout=self.timeout,
            )
        except httpx.HTTPError as e:
            raise TransportError(str(e)) from e
        if resp.status_code >= 400:
            raise ProviderError(resp.status_code, resp.text)
        data = resp.json()["data"]
        return [row["embedding"] for row in data]


# --- gateway ----------------------------------------------------------------

class Gateway:
    """Provider router plus ledger, retry, and budget enforcement."""

    def __init__(
        self,
        chat_providers: dict[str, object],
        embed_providers: dict[str, object] | None = None,
        ledger: UsageLedger | None = None,
        prices: PriceTable | None = None,
        cost_cap: float | None = None,
        retries: int = DEFAULT_RETRIES,
        backoff: float = 0.2,
        max_concurrent_per_provider: int | None = None,
    ):
        self.chat_providers = dict(chat_providers)
        self.embed_providers = dict(embed_providers or {})
        self.ledger = ledger if ledger is not None else UsageLedger()
        self.prices = prices or PriceTable()
        self.cost_cap = cost_cap
        self.retries = retries
        self.backoff = backoff
        self._limits: dict[str, threading.Semaphore] = {}
        if max_concurrent_per_provider is not None:
            if max_concurrent_per_provider < 1:
                raise ValueError("max_concurrent_per_provider must be >= 1")
            self._limits = {
                name: threading.Semaphore(max_concurrent_per_provider) for name in self.chat_providers
            }

    def complete(
        self,
        model: ModelRef,
        messages: list[dict],
        decoding: Decoding | None = None,
        run_id: str = "-",
        agent_role: str = "-",
    ) -> Completion:
        if not messages:
            raise ValueError("messages must be non-empty")
        decoding = decoding or Decoding()
        model = self.prices.apply(model)
        provider = self._chat_provider(model.provider)
        limit = self._limits.get(model.provider)

        attempt = 0
        while True:
            try:
                if limit is not None:
                    with limit:
                        completion = provider.complete(model, messages, decoding)
                else:
                    completion = provider.complete(model, messages, decoding)
                break
            except TransportError:
                if attempt >= self.retries:
                    raise
                sleep = self.backoff * (2**attempt)
                logger.warning("transport failure (attempt %d), retrying in %.2fs", attempt + 1, sleep)
                time.sleep(sleep)
                attempt += 1

        cost = event_cost(completion.input_tokens, completion.output_tokens, model)
        if self.cost_cap is not None and self.ledger.run_cost(run_id) + cost > self.cost_cap:
            raise BudgetExceeded(run_id, self.cost_cap, self.ledger.run_cost(run_id) + cost)
        self.ledger.append(
            UsageEvent(
                run_id=run_id,
                agent_role=agent_role,
                provider=model.provider,
                model_name=model.model_name,
                input_tokens=completion.input_tokens,
                output_tokens=completion.output_tokens,
                latency=completion.latency,
                cost=cost,
            )
        )
        return completion

    def embed(self, model: ModelRef, texts: list[str]) -> list[list[float]]:
        if not texts:
            raise ValueError("texts must be non-empty")
        if any(not t.strip() for t in texts):
            raise ValueError("texts must be non-empty after normalization")
        provider = self._embed_provider(model.provider)
        vectors = provider.embed(model, texts)
        if len(vectors) != len(texts):
            raise DimensionMismatch(f"expected {len(texts)} vectors, got {len(vectors)}")
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise DimensionMismatch(f"ragged embedding output: dims {sorted(dims)}")
        out = []
        for v in vectors:
            arr = np.asarray(v, dtype=float)
            norm = float(np.linalg.norm(arr))
            if norm == 0.0 or not math.isfinite(norm):
                raise DimensionMismatch("zero or non-finite embedding vector")
            out.append((arr / norm).tolist())
        return out

    def embedder(self, model: ModelRef):
        """Bind a model into the `embedder(texts) -> vectors` contract."""
        return lambda texts: self.embed(model, texts)

    def _chat_provider(self, name: str):
        try:
            return self.chat_providers[name]
        except KeyError:
            raise ProviderError(0, f"no chat provider registered for {name!r}") from None

    def _embed_provider(self, name: str):
        try:
            return self.embed_providers[name]
        except KeyError:
            raise ProviderError(0, f"no embedding provider registered for {name!r}") from None
