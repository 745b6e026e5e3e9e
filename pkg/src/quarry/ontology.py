"""In-process ontology concept store with hybrid lexical+vector search.

Terms arrive pre-flattened (curie, iri, label, synonyms, definition,
ontology name), are embedded over "label. definition", and served through
three rankings: IDF-weighted token overlap, cosine similarity, and a convex
fusion of the two. Linear scan is deliberate — slices are small and exact
scores keep fixtures stable.
"""

from __future__ import annotations

import json
import math
import re
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import (
    CorruptSnapshot,
    DuplicateInBatch,
    EmbedderError,
    EmptyIndex,
    NotFound,
    VersionMismatch,
)

INDEX_MAGIC = b"SSIDX"
INDEX_VERSION = 1

_CURIE_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.-]*:\S+$")
_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class OntologyTerm:
    curie: str
    iri: str
    label: str
    synonyms: tuple[str, ...] = ()
    definition: str = ""
    ontology_name: str = ""

    def __post_init__(self):
        if not _CURIE_RE.match(self.curie):
            raise ValueError(f"curie must look like PREFIX:LOCALID, got {self.curie!r}")
        if not self.iri:
            raise ValueError("iri must be non-empty")
        if not self.label:
            raise ValueError("label must be non-empty")

    @property
    def embed_text(self) -> str:
        return f"{self.label}. {self.definition}"

    @property
    def search_text(self) -> str:
        return " ".join([self.label, *self.synonyms, self.definition])

    def to_dict(self) -> dict:
        return {
            "curie": self.curie,
            "iri": self.iri,
            "label": self.label,
            "synonyms": list(self.synonyms),
            "definition": self.definition,
            "ontology_name": self.ontology_name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OntologyTerm":
        return cls(
            curie=d["curie"],
            iri=d["iri"],
            label=d["label"],
            synonyms=tuple(d.get("synonyms", ())),
            definition=d.get("definition", ""),
            ontology_name=d.get("ontology_name", ""),
        )


@dataclass(frozen=True)
class SearchHit:
    term: OntologyTerm
    lexical_score: float
    vector_score: float
    fused_score: float


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def minmax_normalize(scores: list[float]) -> list[float]:
    """Min-max rescale into [0,1]; a flat list maps to all ones."""
    if not scores:
        return []
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [1.0] * len(scores)
    return [(s - lo) / (hi - lo) for s in scores]


def fuse_and_rank(
    curies: list[str],
    lexical: list[float],
    vector: list[float],
    alpha: float,
    k: int,
) -> list[tuple[str, float]]:
    """Rank by alpha*vector + (1-alpha)*lexical, ties broken by curie.

    Pure function so the fusion-linearity property can be brute-force checked
    on arbitrary score matrices.
    """
    fused = [alpha * v + (1 - alpha) * l for l, v in zip(lexical, vector)]
    order = sorted(range(len(curies)), key=lambda i: (-fused[i], curies[i]))
    return [(curies[i], fused[i]) for i in order[:k]]


def load_terms_jsonl(source: bytes | str) -> list[OntologyTerm]:
    """Parse the term-ingestion format: one JSON object per line."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    terms = []
    for line_no, line in enumerate(source.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            terms.append(OntologyTerm.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise ValueError(f"terms file line {line_no}: {e}") from e
    return terms


class OntologyStore:
    """Concept index over a curated ontology slice.

    Reads are lock-free against an immutable snapshot; ingestion builds the
    next snapshot under a writer lock and swaps it in atomically, so searches
    never observe a partially-ingested batch.
    """

    def __init__(self):
        self._write_lock = threading.Lock()
        self._snapshot: dict = {"terms": {}, "vectors": {}, "idf": {}, "doc_tokens": {}}

    # -- ingestion ----------------------------------------------------------

    def ingest(self, terms: list[OntologyTerm], embedder) -> int:
        """Index a batch; re-ingesting an existing curie replaces it."""
        if not terms:
            raise ValueError("terms must be non-empty")
        seen: set[str] = set()
        for t in terms:
            if t.curie in seen:
                raise DuplicateInBatch(t.curie)
            seen.add(t.curie)
        try:
            vectors = embedder([t.embed_text for t in terms])
        except Exception as e:  # embedding contract failure
            raise EmbedderError(str(e)) from e
        if len(vectors) != len(terms):
            raise EmbedderError(f"embedder returned {len(vectors)} vectors for {len(terms)} terms")

        with self._write_lock:
            snap = self._snapshot
            new_terms = dict(snap["terms"])
            new_vectors = dict(snap["vectors"])
            for t, v in zip(terms, vectors):
                new_terms[t.curie] = t
                new_vectors[t.curie] = np.asarray(v, dtype=float)
            self._snapshot = _build_snapshot(new_terms, new_vectors)
        return len(terms)

    def get(self, curie: str) -> OntologyTerm:
        term = self._snapshot["terms"].get(curie)
        if term is None:
            raise NotFound(curie)
        return term

    def terms(self) -> list[OntologyTerm]:
        return [self._snapshot["terms"][c] for c in sorted(self._snapshot["terms"])]

    def __len__(self) -> int:
        return len(self._snapshot["terms"])

    # -- search -------------------------------------------------------------

    def lexical_search(self, query: str, k: int) -> list[SearchHit]:
        """IDF-weighted token-overlap ranking over label+synonyms+definition.

        Scores are min-max normalized within the result list; terms sharing
        no token with the query are omitted entirely.
        """
        snap = self._require_index(query, k)
        raw = _lexical_raw(snap, query)
        scored = [(c, s) for c, s in raw.items() if s > 0.0]
        scored.sort(key=lambda cs: (-cs[1], cs[0]))
        scored = scored[:k]
        norm = minmax_normalize([s for _, s in scored])
        return [
            SearchHit(term=snap["terms"][c], lexical_score=n, vector_score=0.0, fused_score=n)
            for (c, _), n in zip(scored, norm)
        ]

    def vector_search(self, query: str, k: int, embedder) -> list[SearchHit]:
        """Cosine ranking, with similarity mapped into [0,1] via (cos+1)/2."""
        snap = self._require_index(query, k)
        scores = _vector_scores(snap, query, embedder)
        order = sorted(scores, key=lambda c: (-scores[c], c))[:k]
        return [
            SearchHit(term=snap["terms"][c], lexical_score=0.0, vector_score=scores[c], fused_score=scores[c])
            for c in order
        ]

    def hybrid_search(self, query: str, k: int, alpha: float, embedder) -> list[SearchHit]:
        """Convex fusion of the lexical and vector legs over all terms.

        alpha=0 reproduces the lexical ranking and alpha=1 the vector
        ranking; both legs are monotone rescalings of the standalone ops.
        """
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        snap = self._require_index(query, k)
        curies = sorted(snap["terms"])
        raw = _lexical_raw(snap, query)
        if any(raw[c] > 0.0 for c in curies):
            lexical = minmax_normalize([raw[c] for c in curies])
        else:
            # No token overlap anywhere: the lexical leg contributes nothing.
            lexical = [0.0] * len(curies)
        vec_scores = _vector_scores(snap, query, embedder)
        vector = [vec_scores[c] for c in curies]
        lex_by_curie = dict(zip(curies, lexical))
        ranked = fuse_and_rank(curies, lexical, vector, alpha, k)
        return [
            SearchHit(
                term=snap["terms"][c],
                lexical_score=lex_by_curie[c],
                vector_score=vec_scores[c],
                fused_score=f,
            )
            for c, f in ranked
        ]

    def _require_index(self, query: str, k: int) -> dict:
        if not query or not query.strip():
            raise ValueError("query must be non-empty")
        if k < 1:
            raise ValueError("k must be >= 1")
        snap = self._snapshot
        if not snap["terms"]:
            raise EmptyIndex("no terms ingested")
        return snap

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        snap = self._snapshot
        payload = {
            "terms": [snap["terms"][c].to_dict() for c in sorted(snap["terms"])],
            "vectors": {c: snap["vectors"][c].tolist() for c in sorted(snap["vectors"])},
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC + struct.pack(">I", INDEX_VERSION) + blob)

    @classmethod
    def load(cls, path) -> "OntologyStore":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < len(INDEX_MAGIC) + 4 or not data.startswith(INDEX_MAGIC):
            raise CorruptSnapshot("not an index snapshot file")
        (version,) = struct.unpack(">I", data[len(INDEX_MAGIC) : len(INDEX_MAGIC) + 4])
        if version != INDEX_VERSION:
            raise VersionMismatch(version, INDEX_VERSION)
        try:
            payload = json.loads(data[len(INDEX_MAGIC) + 4 :])
            terms = {t["curie"]: OntologyTerm.from_dict(t) for t in payload["terms"]}
            vectors = {c: np.asarray(v, dtype=float) for c, v in payload["vectors"].items()}
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise CorruptSnapshot(f"unreadable index payload: {e}") from e
        store = cls()
        store._snapshot = _build_snapshot(terms, vectors)
        return store


def _build_snapshot(terms: dict[str, OntologyTerm], vectors: dict[str, np.ndarray]) -> dict:
    doc_tokens = {c: set(tokenize(t.search_text)) for c, t in terms.items()}
    n = len(terms)
    df: dict[str, int] = {}
    for toks in doc_tokens.values():
        for tok in toks:
            df[tok] = df.get(tok, 0) + 1
    idf = {tok: math.log((n + 1) / (count + 1)) + 1.0 for tok, count in df.items()}
    return {"terms": terms, "vectors": vectors, "idf": idf, "doc_tokens": doc_tokens}


def _lexical_raw(snap: dict, query: str) -> dict[str, float]:
    """Query-coverage score: sum of IDF over shared tokens / query IDF mass.

    Sums run in sorted token order: set iteration order varies with the
    process hash seed and float addition is not associative, which would
    leak last-ulp differences into fixture digests.
    """
    q_tokens = set(tokenize(query))
    idf = snap["idf"]
    q_mass = sum(idf.get(t, 1.0) for t in sorted(q_tokens))
    scores: dict[str, float] = {}
    for curie, toks in snap["doc_tokens"].items():
        if q_mass <= 0:
            scores[curie] = 0.0
            continue
        overlap = sorted(q_tokens & toks)
        scores[curie] = sum(idf.get(t, 1.0) for t in overlap) / q_mass
    return scores


def _vector_scores(snap: dict, query: str, embedder) -> dict[str, float]:
    try:
        (q_vec,) = embedder([query])
    except Exception as e:
        raise EmbedderError(str(e)) from e
    q = np.asarray(q_vec, dtype=float)
    q_norm = float(np.linalg.norm(q))
    if q_norm == 0:
        raise EmbedderError("query embedded to the zero vector")
    q = q / q_norm
    scores: dict[str, float] = {}
    for curie, vec in snap["vectors"].items():
        if vec.shape != q.shape:
            raise EmbedderError(f"query dim {q.shape[0]} != index dim {vec.shape[0]}")
        denom = float(np.linalg.norm(vec))
        cos = float(np.dot(q, vec / denom)) if denom > 0 else 0.0
        scores[curie] = (cos + 1.0) / 2.0
    return scores
