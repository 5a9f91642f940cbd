import threading

import pytest

from embserve.engine import (
    EMBEDDING,
    FALLBACK,
    IndexedDocument,
    IndexGeneration,
    RecommendationQuery,
    SearchEngine,
    brute_force_oracle,
)
from embserve.errors import DimensionMismatch, DuplicateItemId, SealedGeneration, UnknownItem, WrongIndexMode
from embserve.hashing import SplitMix64
from embserve.sim import random_instance, results_identical
from embserve.store import EmbeddingTypeId, EmbeddingVersion

from conftest import T2, v


def doc(item, vectors=None, provider="p1", geo=(), attrs=None):
    return IndexedDocument(item, provider, frozenset(geo), attrs or {}, vectors or {})


def shadow(docs, fw=1.0):
    engine = SearchEngine("shadow", fw)
    engine.swap_generation(engine.build_generation(docs))
    return engine


def query(version=None, vector=None, **kw):
    return RecommendationQuery(T2, version, vector, **kw)


class TestGenerations:
    def test_empty_build_answers_nothing(self):
        engine = shadow([])
        assert engine.execute_query(query(v(1), [1, 0])) == []

    def test_sealed_generation_rejects_mutation(self):
        gen = SearchEngine.build_generation([doc("a"), doc("b")])
        assert {d.item_id for d in gen.documents()} == {"a", "b"}
        with pytest.raises(SealedGeneration):
            gen.put(doc("c"))
        with pytest.raises(SealedGeneration):
            gen.remove("a")

    def test_duplicate_ids(self):
        with pytest.raises(DuplicateItemId):
            SearchEngine.build_generation([doc("a"), doc("a")])

    def test_swap_returns_previous_and_new_queries_see_new_docs(self):
        engine = SearchEngine("shadow")
        initial = engine.live
        gen = engine.build_generation([doc("x", {v(1): [1, 0]})])
        assert engine.swap_generation(gen) is initial
        assert [r.item_id for r in engine.execute_query(query(v(1), [1, 0]))] == ["x"]

    def test_only_sealed_generations_swap_in(self):
        with pytest.raises(SealedGeneration):
            SearchEngine("shadow").swap_generation(IndexGeneration(sealed=False))

    def test_queries_racing_swaps_see_exactly_one_generation(self):
        engine = SearchEngine("shadow")
        gens = [engine.build_generation([doc(f"g{g}_{i}", {v(1): [1, 0]}) for i in range(5)]) for g in range(20)]
        bad = []

        def reader():
            for _ in range(300):
                out = engine.execute(query(v(1), [1, 0], k=10))
                prefixes = {r.item_id.split("_")[0] for r in out.results}
                if len(prefixes) > 1:
                    bad.append(prefixes)

        threads = [threading.Thread(target=reader) for _ in range(3)]
        for t in threads:
            t.start()
        for g in gens:
            engine.swap_generation(g)
        for t in threads:
            t.join()
        assert not bad


class TestIncremental:
    def test_upsert_replace_and_delete(self):
        engine = SearchEngine("incremental")
        engine.upsert_document(doc("a", {v(1): [1, 0]}))
        assert engine.execute_query(query(v(1), [1, 0]))[0].mode == EMBEDDING
        engine.upsert_document(doc("a", {v(2): [0, 1]}))
        assert engine.execute_query(query(v(1), [1, 0]))[0].mode == FALLBACK
        engine.delete_document("a")
        assert engine.execute_query(query(v(1), [1, 0])) == []
        with pytest.raises(UnknownItem):
            engine.delete_document("a")

    def test_mode_guards(self):
        with pytest.raises(WrongIndexMode):
            SearchEngine("shadow").upsert_document(doc("a"))
        with pytest.raises(WrongIndexMode):
            SearchEngine("incremental").swap_generation(SearchEngine.build_generation([]))
        with pytest.raises(ValueError):
            SearchEngine("sideways")


class TestScoring:
    def test_orthogonal_vectors_score_zero(self):
        [r] = shadow([doc("a", {v(1): [0, 1]})]).execute_query(query(v(1), [1, 0]))
        assert (r.score, r.mode, r.version_used) == (0.0, EMBEDDING, v(1))

    def test_inner_product(self):
        [r] = shadow([doc("a", {v(1): [3, 4]})]).execute_query(query(v(1), [1, 2]))
        assert r.score == 11.0

    def test_fallback_is_min_overlap(self):
        d = doc("a", {v(2): [1, 1]}, attrs={"sports": 0.3})
        q = query(v(1), [1, 0], user_attributes={"sports": 0.5, "tech": 0.2})
        [r] = shadow([d]).execute_query(q)
        assert (r.score, r.mode, r.version_used) == (0.3, FALLBACK, None)

    def test_ties_break_by_item_id(self):
        docs = [doc("i2", {v(1): [0, 1]}), doc("i1", {v(1): [1, 0]}), doc("i3")]
        out = shadow(docs, 0.001).execute_query(query(v(1), [0.5, 0.5], k=2))
        assert [(r.item_id, r.score) for r in out] == [("i1", 0.5), ("i2", 0.5)]

    def test_filters(self):
        docs = [doc("us", geo={"US"}), doc("any"), doc("blocked", provider="p9")]
        q = query(user_geo="FR", publisher_blocked_providers={"p9"})
        assert [r.item_id for r in shadow(docs).execute_query(q)] == ["any"]

    def test_k_larger_than_candidates(self):
        out = shadow([doc("a"), doc("b")]).execute_query(query(k=50))
        assert [r.item_id for r in out] == ["a", "b"]

    def test_wrong_dimension_is_an_error(self):
        with pytest.raises(DimensionMismatch):
            shadow([doc("a")]).execute_query(query(v(1), [1, 0, 0]))

    def test_inner_products_only_between_equal_versions(self):
        engine = shadow([doc("a", {v(1): [1, 0], v(2): [0, 1]}), doc("b", {v(2): [1, 1]})])
        engine.execute_query(query(v(2), [1, 1]))
        engine.execute_query(query(v(1), [1, 1]))
        assert engine.cross_version_products == 0
        assert engine.inner_products == {(v(2), v(2)): 2, (v(1), v(1)): 1}

    def test_dump_is_sorted_ndjson(self):
        text = shadow([doc("b"), doc("a", {v(1): [1, 0]})]).dump()
        lines = text.splitlines()
        assert [line.split('"item":"')[1][0] for line in lines] == ["a", "b"]


def test_oracle_on_empty_docs():
    assert brute_force_oracle(query(v(1), [1, 0]), []) == []


def test_engine_matches_oracle_on_random_instances():
    rng = SplitMix64(2024)
    for _ in range(150):
        docs, q, fw = random_instance(rng, T2, max_docs=60)
        assert results_identical(shadow(docs, fw).execute_query(q), brute_force_oracle(q, docs, fw))


def test_single_candidate_sums_components_in_order():
    # with one row left, numpy's reductions may go pairwise; the left-to-right
    # sum is 1.0 here while a pairwise sum cancels to 0.0
    t8 = EmbeddingTypeId("mf", "d8", 8)
    version = EmbeddingVersion(t8, 1)
    docs = [IndexedDocument("only", "p1", frozenset(), {}, {version: [1e16, 1.0, -1e16, 1.0, 0.0, 0.0, 0.0, 0.0]})]
    q = RecommendationQuery(t8, version, [1.0] * 8, k=1)
    engine = SearchEngine("shadow", 1.0)
    engine.swap_generation(engine.build_generation(docs))
    got = engine.execute_query(q)
    assert got[0].score == 1.0
    assert results_identical(got, brute_force_oracle(q, docs, 1.0))
