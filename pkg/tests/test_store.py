import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embserve.errors import DimensionMismatch, InvalidIdentifier, MalformedLine, NonFiniteComponent
from embserve.store import (
    EmbeddingRecord,
    EmbeddingStore,
    EmbeddingTypeId,
    EmbeddingVersion,
    EntityId,
    canonical_key,
    parse_snapshot,
)

from conftest import T2, rec, v


def test_empty_batch_writes_nothing(store):
    assert store.put_batch([]) == 0
    assert len(store) == 0


def test_single_write_round_trip(store):
    assert store.put_batch([rec(1, EntityId.item("i1"), [1.0, 0.0])]) == 1
    assert store.get(v(1), EntityId.item("i1")) == (1.0, 0.0)


def test_last_writer_wins_within_a_batch(store):
    i1 = EntityId.item("i1")
    assert store.put_batch([rec(1, i1, [1.0, 1.0]), rec(1, i1, [2.0, 2.0])]) == 2
    assert store.get(v(1), i1) == (2.0, 2.0)


def test_get_absent_and_version_isolation(store):
    assert store.get(v(1), EntityId.item("nope")) is None
    store.put_batch([rec(1, EntityId.item("i1"), [2.0, 3.0])])
    assert store.get(v(1), EntityId.item("i1")) == (2.0, 3.0)
    assert store.get(v(2), EntityId.item("i1")) is None


def test_max_time_frame(store):
    assert store.max_time_frame(T2) is None
    store.put_batch([rec(1, EntityId.item("a"), [0, 0]), rec(3, EntityId.item("a"), [0, 0])])
    assert store.max_time_frame(T2) == 3
    store.put_batch([rec(4, EntityId.item("a"), [0, 0])])
    assert store.max_time_frame(T2) == 4


def test_writing_a_new_version_leaves_older_ones_alone(store):
    store.put_batch([rec(1, EntityId.item("a"), [1, 2])])
    before = dict(store.table(v(1)))
    store.put_batch([rec(2, EntityId.item("a"), [9, 9])])
    assert dict(store.table(v(1))) == before


def test_dimension_is_fixed_per_algorithm_and_config(store):
    store.put_batch([rec(1, EntityId.item("a"), [1, 2])])
    wider = EmbeddingTypeId("mf", "d2", 3)
    with pytest.raises(DimensionMismatch):
        store.put_batch([EmbeddingRecord(EmbeddingVersion(wider, 2), EntityId.item("a"), [1, 2, 3])])


def test_record_validation():
    with pytest.raises(DimensionMismatch):
        rec(1, EntityId.item("a"), [1.0])
    with pytest.raises(NonFiniteComponent):
        rec(1, EntityId.item("a"), [1.0, math.nan])
    with pytest.raises(InvalidIdentifier):
        EntityId.item("bad|id")
    with pytest.raises(InvalidIdentifier):
        EntityId.item("")


def test_canonical_key_layout():
    assert canonical_key(v(3), EntityId.user("u1")) == "mf|d2|3|user|u1"


def test_batch_is_all_or_nothing(store):
    good = rec(1, EntityId.item("a"), [1, 2])
    other = EmbeddingRecord(EmbeddingVersion(EmbeddingTypeId("mf", "d2", 3), 1), EntityId.item("b"), [1, 2, 3])
    with pytest.raises(DimensionMismatch):
        store.put_batch([good, other])
    assert len(store) == 0


def test_gc_drops_only_older_versions(store):
    store.put_batch([rec(tf, EntityId.item("a"), [tf, tf]) for tf in (1, 2, 3)])
    assert store.drop_versions_before(T2, 3) == 2
    assert store.time_frames(T2) == [3]


# -- snapshots ------------------------------------------------------------------


def test_snapshot_of_empty_store(tmp_path, store):
    path = tmp_path / "s.ndjson"
    assert store.save_snapshot(path) == 0
    assert EmbeddingStore().load_snapshot(path) == 0


def test_snapshot_round_trip_three_records(tmp_path, store):
    records = [
        rec(1, EntityId.item("i1"), [0.1, 1 / 3]),
        rec(1, EntityId.user("u1"), [-0.0, 5e-324]),
        rec(2, EntityId.attribute("sports"), [1e308, -2.5]),
    ]
    store.put_batch(records)
    path = tmp_path / "s.ndjson"
    assert store.save_snapshot(path) == 3
    loaded = EmbeddingStore()
    assert loaded.load_snapshot(path) == 3
    for r in records:
        got = loaded.get(r.version, r.entity)
        assert [x.hex() for x in got] == [x.hex() for x in r.vector]
    assert loaded.dumps() == store.dumps()


def test_snapshot_dimension_error_names_the_line():
    text = (
        '{"algo":"mf","config":"d2","tf":1,"kind":"item","id":"a","vec":[1,2]}\n'
        '{"algo":"mf","config":"d2","tf":1,"kind":"item","id":"b","vec":[1,2,3]}\n'
    )
    with pytest.raises(DimensionMismatch) as info:
        parse_snapshot(text)
    assert info.value.line_no == 2
    assert "line 2" in str(info.value)


@pytest.mark.parametrize(
    "line",
    [
        "not json",
        '{"algo":"mf","config":"d2","tf":1,"kind":"item","id":"a"}',
        '{"algo":"mf","config":"d2","tf":-1,"kind":"item","id":"a","vec":[1,2]}',
        '{"algo":"mf","config":"d2","tf":1,"kind":"planet","id":"a","vec":[1,2]}',
        '{"algo":"mf","config":"d2","tf":1,"kind":"item","id":"a","vec":["x",2]}',
    ],
)
def test_malformed_snapshot_lines(line):
    with pytest.raises(MalformedLine) as info:
        parse_snapshot('{"algo":"mf","config":"d2","tf":1,"kind":"item","id":"z","vec":[0,0]}\n' + line + "\n")
    assert info.value.line_no == 2


finite = st.floats(allow_nan=False, allow_infinity=False)
ident = st.text(alphabet=st.characters(blacklist_characters="|", blacklist_categories=("Cs",)), min_size=1, max_size=8)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 5), st.sampled_from(["user", "item", "attribute"]), ident, st.lists(finite, min_size=3, max_size=3)),
        max_size=20,
    )
)
def test_snapshot_round_trip_is_bit_exact(rows):
    t = EmbeddingTypeId("algo", "cfg", 3)
    store = EmbeddingStore()
    store.put_batch([EmbeddingRecord(EmbeddingVersion(t, tf), EntityId(kind, i), vec) for tf, kind, i, vec in rows])
    again = EmbeddingStore(parse_snapshot(store.dumps()))
    assert again.dumps() == store.dumps()
    for r in store.records():
        assert [x.hex() for x in again.get(r.version, r.entity)] == [x.hex() for x in r.vector]
