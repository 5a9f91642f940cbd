from embserve.engine import EMBEDDING, FALLBACK, IndexedDocument, SearchEngine
from embserve.orchestrator import EmbeddingsOrchestrator, UserEmbedding
from embserve.serving import PublisherRules, ServingLayer, UserRequest, build_query
from embserve.store import EmbeddingStore, EntityId
from embserve.trainer import ModelKind

from conftest import T2, rec, v


def world(in_use=True):
    store = EmbeddingStore([
        rec(1, EntityId.user("u1"), [0.5, 0.5]),
        rec(1, EntityId.item("i1"), [1, 0]),
        rec(1, EntityId.item("i2"), [0, 1]),
    ])
    eo = EmbeddingsOrchestrator(store, {T2: ModelKind.DIRECT_DIRECT})
    eo.poll(T2)
    if in_use:
        eo.set_version_in_use(T2, v(1))
    engine = SearchEngine("shadow", fallback_weight=0.001)
    docs = [
        IndexedDocument("i1", "p1", frozenset(), {}, {v(1): store.get(v(1), EntityId.item("i1"))}),
        IndexedDocument("i2", "p1", frozenset(), {}, {v(1): store.get(v(1), EntityId.item("i2"))}),
        IndexedDocument("i3", "p2", frozenset({"US"}), {"a": 1.0}, {}),
    ]
    engine.swap_generation(engine.build_generation(docs))
    rules = {"pub": PublisherRules("pub", frozenset({"p9"}))}
    return ServingLayer(eo, engine, rules)


def test_without_an_in_use_version_everything_is_fallback():
    out = world(in_use=False).recommend(UserRequest("u1", {"a": 1.0}, "US", k=5), T2)
    assert {r.mode for r in out} == {FALLBACK}


def test_tie_break_example():
    out = world().recommend(UserRequest("u1", user_geo="FR", k=2), T2)
    assert [(r.item_id, r.score, r.mode) for r in out] == [("i1", 0.5, EMBEDDING), ("i2", 0.5, EMBEDDING)]


def test_geo_targeted_item_never_leaks():
    out = world().recommend(UserRequest("u1", {"a": 1.0}, "FR", k=10), T2)
    assert "i3" not in [r.item_id for r in out]


def test_unknown_user_degrades_to_fallback():
    out = world().recommend(UserRequest("nobody", {"a": 1.0}, "US", k=10), T2)
    assert {r.mode for r in out} == {FALLBACK}
    assert out[0].item_id == "i3"


def test_version_passes_through_untouched():
    serving = world()
    response, q = serving.resolve(UserRequest("u1", user_geo="US", publisher_id="pub"), T2)
    assert q.user_version is response.version
    assert q.publisher_blocked_providers == frozenset({"p9"})


def test_build_query_examples():
    req = UserRequest("u1", {"a": 0.5})
    q = build_query(req, T2, None)
    assert q.user_vector is None and q.user_version is None and q.user_attributes == {"a": 0.5}
    q = build_query(req, T2, UserEmbedding(v(2), (1.0, 2.0)))
    assert (q.user_version, q.user_vector) == (v(2), (1.0, 2.0))
    q = build_query(req, T2, None, PublisherRules("x", frozenset({"p9"})))
    assert q.publisher_blocked_providers == {"p9"}


def test_identical_inputs_give_identical_responses():
    serving = world()
    req = UserRequest("u1", {"a": 1.0}, "US", "pub", 3)
    first = [r.to_json() for r in serving.recommend(req, T2)]
    assert all([r.to_json() for r in serving.recommend(req, T2)] == first for _ in range(5))
