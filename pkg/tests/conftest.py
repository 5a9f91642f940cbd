import pytest

from embserve.store import EmbeddingRecord, EmbeddingStore, EmbeddingTypeId, EmbeddingVersion, EntityId

T2 = EmbeddingTypeId("mf", "d2", 2)


def v(tf: int, type_id: EmbeddingTypeId = T2) -> EmbeddingVersion:
    return EmbeddingVersion(type_id, tf)


def rec(tf: int, entity: EntityId, vec, type_id: EmbeddingTypeId = T2) -> EmbeddingRecord:
    return EmbeddingRecord(EmbeddingVersion(type_id, tf), entity, vec)


@pytest.fixture
def store() -> EmbeddingStore:
    return EmbeddingStore()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import CRITERIA

    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
