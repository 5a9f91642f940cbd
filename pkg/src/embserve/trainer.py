"""Deterministic stand-in for the offline embedding trainer.

Each cycle emits one training time frame of records for the configured model
kind and writes it straight to the store. It never talks to the orchestrator.
Vectors and coverage are pure functions of ``(seed, type, time_frame, entity)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from embserve.catalog import Universe
from embserve.errors import InvalidScenario, NonMonotoneTimeFrame
from embserve.hashing import MASK64, fnv1a64, splitmix64
from embserve.store import (
    EmbeddingRecord,
    EmbeddingStore,
    EmbeddingTypeId,
    EmbeddingVersion,
    EntityId,
    EntityKind,
    Vector,
    canonical_key,
)

log = logging.getLogger(__name__)

_TWO_63 = 9223372036854775808.0
_TWO_64 = 18446744073709551616.0
_COVERAGE_SALT = 0x9E37


class ModelKind(str, Enum):
    DIRECT_DIRECT = "DirectDirect"
    INDIRECT_DIRECT = "IndirectDirect"
    INDIRECT_INDIRECT = "IndirectIndirect"

    @property
    def trained_kinds(self) -> frozenset[EntityKind]:
        if self is ModelKind.DIRECT_DIRECT:
            return frozenset({EntityKind.USER, EntityKind.ITEM})
        if self is ModelKind.INDIRECT_DIRECT:
            return frozenset({EntityKind.ITEM})
        return frozenset({EntityKind.ATTRIBUTE})

    @property
    def direct_items(self) -> bool:
        return self is not ModelKind.INDIRECT_INDIRECT

    @property
    def direct_users(self) -> bool:
        return self is ModelKind.DIRECT_DIRECT


class EmbeddingSource(str, Enum):
    FIXTURE = "fixture"
    HASHED = "hashed"


@dataclass(frozen=True)
class TrainerConfig:
    model_kind: ModelKind
    type_id: EmbeddingTypeId
    embedding_source: EmbeddingSource = EmbeddingSource.HASHED
    coverage_fraction: float = 1.0
    seed: int = 0
    # fixture vectors used for every time frame unless overridden per frame
    fixtures: Mapping[EntityId, Sequence[float]] = field(default_factory=dict)
    fixtures_by_time_frame: Mapping[int, Mapping[EntityId, Sequence[float]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.coverage_fraction <= 1.0:
            raise InvalidScenario(f"coverage_fraction must be in [0, 1], got {self.coverage_fraction}")

    def fixtures_for(self, time_frame: int) -> Mapping[EntityId, Sequence[float]]:
        return self.fixtures_by_time_frame.get(time_frame, self.fixtures)


def hashed_component(seed: int, key: str, j: int) -> float:
    u = splitmix64((seed & MASK64) ^ fnv1a64(f"{key}|{j}"))
    return u / _TWO_63 - 1.0


def hashed_vector(seed: int, version: EmbeddingVersion, entity: EntityId) -> Vector:
    """The synthetic embedding of ``entity`` at ``version``; components in [-1, 1)."""
    key = canonical_key(version, entity)
    return tuple(hashed_component(seed, key, j) for j in range(version.type_id.dimension))


def is_covered(seed: int, version: EmbeddingVersion, entity: EntityId, coverage_fraction: float) -> bool:
    if coverage_fraction >= 1.0:
        return True
    u = splitmix64((seed & MASK64) ^ fnv1a64(canonical_key(version, entity)) ^ _COVERAGE_SALT)
    return u / _TWO_64 < coverage_fraction


def eligible_entities(universe: Universe, model_kind: ModelKind) -> list[EntityId]:
    kinds = model_kind.trained_kinds
    out: list[EntityId] = []
    if EntityKind.USER in kinds:
        out.extend(u.entity for u in universe.users)
    if EntityKind.ITEM in kinds:
        out.extend(i.entity for i in universe.items)
    if EntityKind.ATTRIBUTE in kinds:
        out.extend(EntityId.attribute(a) for a in universe.attributes)
    return out


def cycle_records(universe: Universe, config: TrainerConfig, time_frame: int) -> list[EmbeddingRecord]:
    version = EmbeddingVersion(config.type_id, time_frame)
    records = []
    if config.embedding_source is EmbeddingSource.FIXTURE:
        fixtures = config.fixtures_for(time_frame)
        allowed = config.model_kind.trained_kinds
        for entity in sorted(fixtures):
            if entity.kind not in allowed:
                raise InvalidScenario(f"{config.model_kind.value} model cannot train {entity}")
            if is_covered(config.seed, version, entity, config.coverage_fraction):
                records.append(EmbeddingRecord(version, entity, fixtures[entity]))
    else:
        for entity in eligible_entities(universe, config.model_kind):
            if is_covered(config.seed, version, entity, config.coverage_fraction):
                records.append(EmbeddingRecord(version, entity, hashed_vector(config.seed, version, entity)))
    return records


class Trainer:
    """One trainer per embedding type, writing on its own cadence."""

    def __init__(
        self,
        store: EmbeddingStore,
        config: TrainerConfig,
        cache: dict[tuple[EmbeddingTypeId, int], list[EmbeddingRecord]] | None = None,
    ) -> None:
        self.store = store
        self.config = config
        self._last_time_frame: int | None = None
        # records are pure functions of (config, universe, time frame); callers
        # that rerun the same universe and config may share this across trainers
        self._cache = cache

    @property
    def last_time_frame(self) -> int | None:
        return self._last_time_frame

    def run_cycle(self, universe: Universe, time_frame: int) -> int:
        floor = self._last_time_frame
        stored = self.store.max_time_frame(self.config.type_id)
        if stored is not None and (floor is None or stored > floor):
            floor = stored
        if floor is not None and time_frame <= floor:
            raise NonMonotoneTimeFrame(
                f"time frame {time_frame} is not after {floor} for {self.config.type_id.key}"
            )
        if self._cache is None:
            records = cycle_records(universe, self.config, time_frame)
        else:
            key = (self.config.type_id, time_frame)
            records = self._cache.get(key)
            if records is None:
                records = self._cache[key] = cycle_records(universe, self.config, time_frame)
        written = self.store.put_batch(records)
        self._last_time_frame = time_frame
        log.debug("trained %s tf=%d: %d records", self.config.type_id.key, time_frame, written)
        return written

    def next_cycle(self, universe: Universe) -> tuple[int, int]:
        """Run the cycle after the last one; returns ``(time_frame, records)``."""
        floor = max(
            (tf for tf in (self._last_time_frame, self.store.max_time_frame(self.config.type_id)) if tf is not None),
            default=0,
        )
        tf = floor + 1
        return tf, self.run_cycle(universe, tf)


def changed_entities(
    store: EmbeddingStore, type_id: EmbeddingTypeId, since_time_frame: int | None, now_time_frame: int
) -> set[EntityId]:
    """Entities with a record in any time frame in ``(since, now]``; the incremental change feed."""
    if since_time_frame is not None and since_time_frame > now_time_frame:
        raise ValueError("since_time_frame must not exceed now_time_frame")
    lo = -1 if since_time_frame is None else since_time_frame
    out: set[EntityId] = set()
    for tf in store.time_frames(type_id):
        if lo < tf <= now_time_frame:
            out.update(store.entities(EmbeddingVersion(type_id, tf)))
    return out
