import pytest

from embserve.catalog import CatalogItem, Universe, UserProfile
from embserve.errors import InvalidScenario, NonMonotoneTimeFrame
from embserve.store import EmbeddingStore, EmbeddingTypeId, EmbeddingVersion, EntityId, EntityKind
from embserve.trainer import (
    EmbeddingSource,
    ModelKind,
    Trainer,
    TrainerConfig,
    changed_entities,
    hashed_vector,
    is_covered,
)

T4 = EmbeddingTypeId("mf", "d4", 4)

# Frozen regression constant: seed 7, tf 1, item "i1", type mf|d4. Computed
# once with a standalone FNV-1a / splitmix64 evaluation; bit patterns below.
HASHED_I1 = tuple(
    float.fromhex(h)
    for h in ("0x1.c151f78b2f3b2p-1", "0x1.836228fafa784p-1", "-0x1.1f1eafcb6e754p-3", "-0x1.2b02ae057ae5ap-1")
)

UNIVERSE = Universe(
    users=(UserProfile("u1", {"a": 1.0}), UserProfile("u2", {"b": 1.0})),
    items=(CatalogItem("i1", "p1", attributes={"a": 1.0}), CatalogItem("i2", "p1", attributes={"b": 1.0})),
    attributes=("a", "b", "c"),
)


def fixture_trainer(fixtures, coverage=1.0, kind=ModelKind.DIRECT_DIRECT, type_id=EmbeddingTypeId("mf", "d2", 2)):
    store = EmbeddingStore()
    cfg = TrainerConfig(kind, type_id, EmbeddingSource.FIXTURE, coverage, seed=3, fixtures=fixtures)
    return store, Trainer(store, cfg)


def test_fixture_source_writes_fixtures_exactly():
    store, trainer = fixture_trainer({EntityId.item("i1"): [1.0, 0.0], EntityId.item("i2"): [0.0, 1.0]})
    assert trainer.run_cycle(UNIVERSE, 1) == 2
    version = EmbeddingVersion(trainer.config.type_id, 1)
    assert store.get(version, EntityId.item("i1")) == (1.0, 0.0)
    assert store.get(version, EntityId.item("i2")) == (0.0, 1.0)


def test_zero_coverage_writes_nothing():
    store, trainer = fixture_trainer({EntityId.item("i1"): [1.0, 0.0]}, coverage=0.0)
    assert trainer.run_cycle(UNIVERSE, 1) == 0
    assert len(store) == 0


def test_hashed_vector_regression_constant():
    vec = hashed_vector(7, EmbeddingVersion(T4, 1), EntityId.item("i1"))
    assert [x.hex() for x in vec] == [x.hex() for x in HASHED_I1]
    assert all(-1.0 <= x < 1.0 for x in vec)


def test_hashed_source_is_deterministic():
    runs = []
    for _ in range(2):
        store = EmbeddingStore()
        Trainer(store, TrainerConfig(ModelKind.DIRECT_DIRECT, T4, coverage_fraction=0.5, seed=9)).run_cycle(UNIVERSE, 1)
        runs.append(store.dumps())
    assert runs[0] == runs[1]


def test_coverage_is_a_pure_function_of_the_key():
    version = EmbeddingVersion(T4, 2)
    e = EntityId.item("i9")
    assert is_covered(1, version, e, 0.5) == is_covered(1, version, e, 0.5)
    assert is_covered(1, version, e, 1.0)
    assert not is_covered(1, version, e, 0.0)


@pytest.mark.parametrize(
    "kind, expected",
    [
        (ModelKind.DIRECT_DIRECT, {EntityKind.USER, EntityKind.ITEM}),
        (ModelKind.INDIRECT_DIRECT, {EntityKind.ITEM}),
        (ModelKind.INDIRECT_INDIRECT, {EntityKind.ATTRIBUTE}),
    ],
)
def test_model_kind_discipline(kind, expected):
    store = EmbeddingStore()
    Trainer(store, TrainerConfig(kind, T4, seed=1)).run_cycle(UNIVERSE, 1)
    assert {r.entity.kind for r in store.records()} == expected


def test_fixture_of_the_wrong_kind_is_rejected():
    _, trainer = fixture_trainer({EntityId.attribute("a"): [1.0, 0.0]})
    with pytest.raises(InvalidScenario):
        trainer.run_cycle(UNIVERSE, 1)


def test_time_frames_must_increase():
    store, trainer = fixture_trainer({EntityId.item("i1"): [1.0, 0.0]})
    trainer.run_cycle(UNIVERSE, 2)
    with pytest.raises(NonMonotoneTimeFrame):
        trainer.run_cycle(UNIVERSE, 2)
    with pytest.raises(NonMonotoneTimeFrame):
        trainer.run_cycle(UNIVERSE, 1)
    assert trainer.next_cycle(UNIVERSE) == (3, 1)


def test_changed_entities_feed():
    store = EmbeddingStore()
    t = EmbeddingTypeId("mf", "d2", 2)
    Trainer(store, TrainerConfig(ModelKind.DIRECT_DIRECT, t, EmbeddingSource.FIXTURE,
                                 fixtures_by_time_frame={1: {EntityId.item("i1"): [1, 0]}, 2: {EntityId.item("i2"): [0, 1]}})).run_cycle(UNIVERSE, 1)
    trainer = Trainer(store, TrainerConfig(ModelKind.DIRECT_DIRECT, t, EmbeddingSource.FIXTURE,
                                           fixtures_by_time_frame={2: {EntityId.item("i2"): [0, 1]}}))
    trainer.run_cycle(UNIVERSE, 2)
    assert changed_entities(store, t, 2, 2) == set()
    assert changed_entities(store, t, 0, 1) == {EntityId.item("i1")}
    assert changed_entities(store, t, None, 2) == {EntityId.item("i1"), EntityId.item("i2")}
    with pytest.raises(ValueError):
        changed_entities(store, t, 3, 2)
