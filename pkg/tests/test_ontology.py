import random

import pytest

from quarry.errors import DuplicateInBatch, EmbedderError, EmptyIndex, NotFound, VersionMismatch
from quarry.ontology import (
    OntologyStore,
    OntologyTerm,
    fuse_and_rank,
    load_terms_jsonl,
    minmax_normalize,
    tokenize,
)

BRAIN_SENTENCE = "We recorded activity in the cortex, the outermost region of the brain."
PLANT_SENTENCE = "The cortex is a primary plant tissue between the epidermis and the vascular cylinder."


class TestIngest:
    def test_nine_term_slice_one_per_ontology(self, slice_terms, embedder):
        nine = [t for t in slice_terms if t.ontology_name != "Plant Ontology"]
        assert len(nine) == 9
        assert len({t.ontology_name for t in nine}) == 9
        store = OntologyStore()
        assert store.ingest(nine, embedder) == 9
        for term in nine:
            assert store.get(term.curie) == term

    def test_duplicate_curie_in_batch(self, slice_terms, embedder):
        dup = [slice_terms[0], slice_terms[0]]
        with pytest.raises(DuplicateInBatch) as exc:
            OntologyStore().ingest(dup, embedder)
        assert exc.value.curie == slice_terms[0].curie

    def test_empty_batch_rejected(self, embedder):
        with pytest.raises(ValueError):
            OntologyStore().ingest([], embedder)

    def test_reingest_replaces_idempotently(self, slice_terms, embedder, store):
        before = len(store)
        store.ingest(slice_terms, embedder)
        assert len(store) == before

    def test_reingest_updates_term_content(self, slice_terms, embedder, store):
        from dataclasses import replace

        updated = replace(store.get("CL:0000540"), definition="Revised definition of a nerve cell.")
        store.ingest([updated], embedder)
        assert store.get("CL:0000540").definition.startswith("Revised")
        assert len(store) == len(slice_terms)

    def test_embedder_failure_wrapped(self, slice_terms):
        def broken(texts):
            raise RuntimeError("no embeddings today")

        with pytest.raises(EmbedderError):
            OntologyStore().ingest(slice_terms, broken)

    def test_curie_shape_enforced(self):
        with pytest.raises(ValueError):
            OntologyTerm(curie="notacurie", iri="http://x", label="x")


class TestGet:
    def test_table_slice_definition_retrievable(self, store):
        term = store.get("UBERON:0000956")
        assert term.label == "cortex"
        assert "Outermost region of the brain" in term.definition

    def test_unknown_curie(self, store):
        with pytest.raises(NotFound):
            store.get("UBERON:9999999")

    def test_lookup_is_case_sensitive(self, store):
        with pytest.raises(NotFound):
            store.get("uberon:0000956")


class TestLexicalSearch:
    def test_exact_label_match_ranks_first(self, store):
        hits = store.lexical_search("working memory", k=1)
        assert hits[0].term.curie == "NBO:0000313"
        assert hits[0].lexical_score == 1.0

    def test_zero_overlap_returns_empty(self, store):
        assert store.lexical_search("zzzz qqqq", k=5) == []

    def test_definition_query_finds_cortex(self, store):
        hits = store.lexical_search("outermost region of the brain", k=3)
        assert hits[0].term.curie == "UBERON:0000956"

    def test_empty_index(self, embedder):
        with pytest.raises(EmptyIndex):
            OntologyStore().lexical_search("anything", k=1)

    def test_scores_in_unit_interval_and_sorted(self, store):
        hits = store.lexical_search("the brain region of tissue", k=10)
        scores = [h.lexical_score for h in hits]
        assert all(0.0 <= s <= 1.0 for s in scores)
        assert scores == sorted(scores, reverse=True)


class TestVectorSearch:
    def test_self_similarity_rank_one(self, store, slice_terms, embedder):
        term = store.get("CL:0000540")
        hits = store.vector_search(term.embed_text, k=1, embedder=embedder)
        assert hits[0].term.curie == "CL:0000540"
        assert hits[0].vector_score == pytest.approx(1.0, abs=1e-9)

    def test_k_larger_than_index(self, store, embedder):
        hits = store.vector_search("cortex", k=100, embedder=embedder)
        assert len(hits) == len(store)

    def test_brain_context_orders_uberon_over_plant(self, store, embedder):
        hits = store.vector_search(BRAIN_SENTENCE, k=len(store), embedder=embedder)
        order = [h.term.curie for h in hits]
        assert order.index("UBERON:0000956") < order.index("PO:0005708")

    def test_scores_mapped_from_cosine(self, store, embedder):
        hits = store.vector_search("cortex", k=len(store), embedder=embedder)
        assert all(0.0 <= h.vector_score <= 1.0 for h in hits)


class TestHybridSearch:
    def test_alpha_zero_reproduces_lexical(self, store, embedder):
        lex = store.lexical_search("outermost region of the brain", k=5)
        hyb = store.hybrid_search("outermost region of the brain", k=5, alpha=0.0, embedder=embedder)
        lex_order = [h.term.curie for h in lex]
        assert [h.term.curie for h in hyb][: len(lex_order)] == lex_order

    def test_alpha_one_reproduces_vector(self, store, embedder):
        vec = store.vector_search(BRAIN_SENTENCE, k=5, embedder=embedder)
        hyb = store.hybrid_search(BRAIN_SENTENCE, k=5, alpha=1.0, embedder=embedder)
        assert [h.term.curie for h in hyb] == [h.term.curie for h in vec]

    def test_hand_arithmetic_fusion(self):
        # lexical 0.8 / vector 0.2 fuses to 0.50; 0.4 / 0.7 fuses to 0.55
        ranked = fuse_and_rank(["A", "B"], [0.8, 0.4], [0.2, 0.7], alpha=0.5, k=2)
        assert ranked[0] == ("B", pytest.approx(0.55))
        assert ranked[1] == ("A", pytest.approx(0.50))

    def test_fused_score_invariant(self, store, embedder):
        alpha = 0.3
        for hit in store.hybrid_search(BRAIN_SENTENCE, k=10, alpha=alpha, embedder=embedder):
            expected = alpha * hit.vector_score + (1 - alpha) * hit.lexical_score
            assert hit.fused_score == pytest.approx(expected, abs=1e-12)

    def test_cortex_disambiguation_by_context(self, store, embedder):
        brain = store.hybrid_search("cortex. " + BRAIN_SENTENCE, k=1, alpha=0.5, embedder=embedder)
        plant = store.hybrid_search("cortex. " + PLANT_SENTENCE, k=1, alpha=0.5, embedder=embedder)
        assert brain[0].term.curie == "UBERON:0000956"
        assert plant[0].term.curie == "PO:0005708"

    def test_alpha_out_of_range(self, store, embedder):
        with pytest.raises(ValueError):
            store.hybrid_search("cortex", k=1, alpha=1.5, embedder=embedder)

    def test_fusion_linearity_brute_force(self):
        rng = random.Random(42)
        for _ in range(50):
            n = rng.randint(1, 50)
            curies = [f"T:{i:04d}" for i in range(n)]
            lex = [rng.random() for _ in range(n)]
            vec = [rng.random() for _ in range(n)]
            alpha = rng.random()
            k = rng.randint(1, n)
            ranked = fuse_and_rank(curies, lex, vec, alpha, k)
            fused = {c: alpha * v + (1 - alpha) * l for c, l, v in zip(curies, lex, vec)}
            brute = sorted(curies, key=lambda c: (-fused[c], c))[:k]
            assert [c for c, _ in ranked] == brute

    def test_determinism(self, store, embedder):
        a = store.hybrid_search(BRAIN_SENTENCE, k=10, alpha=0.5, embedder=embedder)
        b = store.hybrid_search(BRAIN_SENTENCE, k=10, alpha=0.5, embedder=embedder)
        assert a == b


class TestPersistence:
    def test_save_load_roundtrip(self, store, embedder, tmp_path):
        path = tmp_path / "slice.ssidx"
        store.save(path)
        loaded = OntologyStore.load(path)
        assert len(loaded) == len(store)
        assert loaded.get("UBERON:0000956") == store.get("UBERON:0000956")
        before = [h.term.curie for h in store.hybrid_search(BRAIN_SENTENCE, 5, 0.5, embedder)]
        after = [h.term.curie for h in loaded.hybrid_search(BRAIN_SENTENCE, 5, 0.5, embedder)]
        assert before == after

    def test_version_mismatch(self, store, tmp_path):
        path = tmp_path / "slice.ssidx"
        store.save(path)
        data = bytearray(path.read_bytes())
        data[5:9] = (99).to_bytes(4, "big")
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatch):
            OntologyStore.load(path)

    def test_magic_header(self, store, tmp_path):
        path = tmp_path / "slice.ssidx"
        store.save(path)
        assert path.read_bytes()[:5] == b"SSIDX"


def test_load_terms_jsonl_rejects_bad_lines():
    good = '{"curie": "A:1", "iri": "http://x", "label": "a"}'
    with pytest.raises(ValueError) as exc:
        load_terms_jsonl(good + "\n{broken json}")
    assert "line 2" in str(exc.value)


def test_minmax_edge_cases():
    assert minmax_normalize([]) == []
    assert minmax_normalize([0.4]) == [1.0]
    assert minmax_normalize([2.0, 2.0]) == [1.0, 1.0]
    assert minmax_normalize([1.0, 3.0]) == [0.0, 1.0]


def test_tokenize_lowercases_and_splits():
    assert tokenize("Working-Memory, tasks!") == ["working", "memory", "tasks"]
