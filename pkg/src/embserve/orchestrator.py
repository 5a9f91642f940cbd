"""The Embeddings Orchestrator.

Owns, per embedding type, a ``latest`` version (advanced by polling the
store) and a ``version in use`` (advanced only by the indexing layer). The
serving layer asks for a user embedding by type alone and gets back the
vector together with the in-use version it was resolved at.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

from embserve.errors import (
    EmptyAttributeSet,
    NonFiniteComponent,
    RegressingVersion,
    UnknownEmbeddingType,
    UnknownVersion,
)
from embserve.store import EmbeddingStore, EmbeddingTypeId, EmbeddingVersion, EntityId, Vector
from embserve.trainer import ModelKind

log = logging.getLogger(__name__)

DEFAULT_CACHE_CAPACITY = 4096


class UserEmbedding(NamedTuple):
    version: EmbeddingVersion
    vector: Vector


class Aggregate(NamedTuple):
    vector: Vector | None
    misses: tuple[EntityId, ...]


class VersionStates(NamedTuple):
    latest: EmbeddingVersion | None
    in_use: EmbeddingVersion | None


def weighted_sum(
    dimension: int, weights: Mapping[EntityId, float], lookup
) -> Aggregate:
    """Sum ``w * lookup(entity)`` over entities in ascending id order, skipping misses.

    The accumulator starts at ``+0.0`` and every component is updated with
    one multiply and one add, so the result is bit-reproducible.
    """
    if not weights:
        raise EmptyAttributeSet("aggregation needs at least one weighted attribute")
    acc = [0.0] * dimension
    misses = []
    hit = False
    for entity in sorted(weights):
        w = weights[entity]
        if not math.isfinite(w):
            raise NonFiniteComponent(f"weight for {entity} is {w!r}")
        vec = lookup(entity)
        if vec is None:
            misses.append(entity)
            continue
        hit = True
        for j in range(dimension):
            acc[j] += w * vec[j]
    return Aggregate(tuple(acc) if hit else None, tuple(misses))


@dataclass
class _TypeState:
    model_kind: ModelKind
    latest: EmbeddingVersion | None = None
    in_use: EmbeddingVersion | None = None
    lock: threading.RLock = field(default_factory=threading.RLock)
    cache: OrderedDict = field(default_factory=OrderedDict)


class EmbeddingsOrchestrator:
    def __init__(
        self,
        store: EmbeddingStore,
        types: Mapping[EmbeddingTypeId, ModelKind],
        cache_capacity: int = DEFAULT_CACHE_CAPACITY,
    ) -> None:
        if cache_capacity < 0:
            raise ValueError("cache_capacity must be >= 0")
        self.store = store
        self.cache_capacity = cache_capacity
        self._states = {t: _TypeState(ModelKind(kind)) for t, kind in types.items()}
        self._by_name = {t.name: t for t in self._states}
        if len(self._by_name) != len(self._states):
            raise ValueError("two registered types share (algorithm_name, config_tag)")
        # (type key, from tf, to tf) for every in-use transition, in order
        self.transitions: list[tuple[str, int | None, int]] = []
        self.cache_hits = 0
        self.cache_misses = 0
        # bumped on every latest / in-use change, for cheap change detection
        self.state_epoch = 0

    @property
    def types(self) -> list[EmbeddingTypeId]:
        return list(self._states)

    def model_kind(self, type_id: EmbeddingTypeId) -> ModelKind:
        return self._state(type_id).model_kind

    def resolve_type(self, algorithm_name: str, config_tag: str) -> EmbeddingTypeId:
        try:
            return self._by_name[(algorithm_name, config_tag)]
        except KeyError:
            raise UnknownEmbeddingType(f"{algorithm_name}|{config_tag}") from None

    def _state(self, type_id: EmbeddingTypeId) -> _TypeState:
        try:
            return self._states[type_id]
        except KeyError:
            raise UnknownEmbeddingType(type_id.key) from None

    # -- freshness -----------------------------------------------------------

    def poll(self, type_id: EmbeddingTypeId) -> EmbeddingVersion | None:
        """Refresh ``latest`` from the store. Never touches the in-use version."""
        st = self._state(type_id)
        newest = self.store.max_time_frame(type_id)
        with st.lock:
            if newest is not None and (st.latest is None or newest > st.latest.time_frame):
                st.latest = EmbeddingVersion(type_id, newest)
                self.state_epoch += 1
                log.debug("poll %s: latest -> %d", type_id.key, newest)
            return st.latest

    def poll_all(self) -> dict[EmbeddingTypeId, EmbeddingVersion | None]:
        return {t: self.poll(t) for t in self._states}

    # -- synchronization -----------------------------------------------------

    def get_latest_version(self, type_id: EmbeddingTypeId) -> EmbeddingVersion | None:
        return self._state(type_id).latest

    def get_version_in_use(self, type_id: EmbeddingTypeId) -> EmbeddingVersion | None:
        return self._state(type_id).in_use

    def get_states(self, type_id: EmbeddingTypeId) -> VersionStates:
        st = self._state(type_id)
        with st.lock:
            return VersionStates(st.latest, st.in_use)

    def set_version_in_use(self, type_id: EmbeddingTypeId, version: EmbeddingVersion) -> VersionStates:
        st = self._state(type_id)
        if version.type_id != type_id:
            raise UnknownVersion(f"{version.key} does not belong to type {type_id.key}")
        with st.lock:
            if st.in_use is not None and version.time_frame < st.in_use.time_frame:
                raise RegressingVersion(
                    f"{type_id.key}: in-use is tf {st.in_use.time_frame}, refusing tf {version.time_frame}"
                )
            if st.latest is None or version.time_frame > st.latest.time_frame:
                raise UnknownVersion(f"{version.key} was never observed as latest")
            if not self.store.has_version(version):
                raise UnknownVersion(f"no records stored for {version.key}")
            if st.in_use != version:
                prev = st.in_use.time_frame if st.in_use is not None else None
                st.in_use = version
                self.state_epoch += 1
                self.transitions.append((type_id.key, prev, version.time_frame))
                log.debug("%s: in-use -> %d", type_id.key, version.time_frame)
            return VersionStates(st.latest, st.in_use)

    # -- embeddings ----------------------------------------------------------

    def _lookup(self, st: _TypeState, version: EmbeddingVersion, entity: EntityId) -> Vector | None:
        key = (version, entity)
        cache = st.cache
        vec = cache.get(key)
        if vec is not None:
            cache.move_to_end(key)
            self.cache_hits += 1
            return vec
        self.cache_misses += 1
        vec = self.store.get(version, entity)
        if vec is not None and self.cache_capacity:
            cache[key] = vec
            if len(cache) > self.cache_capacity:
                cache.popitem(last=False)
        return vec

    def get_entity_embedding(
        self, type_id: EmbeddingTypeId, version: EmbeddingVersion, entity: EntityId
    ) -> Vector | None:
        st = self._state(type_id)
        if version.type_id != type_id:
            return None
        with st.lock:
            return self._lookup(st, version, entity)

    def aggregate_embedding(
        self, type_id: EmbeddingTypeId, version: EmbeddingVersion, attrs: Mapping[EntityId, float]
    ) -> Aggregate:
        st = self._state(type_id)
        if not attrs:
            raise EmptyAttributeSet("aggregation needs at least one weighted attribute")
        if version.type_id != type_id:
            return Aggregate(None, tuple(sorted(attrs)))
        with st.lock:
            return weighted_sum(type_id.dimension, attrs, lambda e: self._lookup(st, version, e))

    def get_user_embedding(
        self, type_id: EmbeddingTypeId, user: EntityId | Mapping[EntityId, float]
    ) -> UserEmbedding | None:
        """Resolve a user vector at the current in-use version, atomically.

        Direct-user models take the user's id; indirect ones take weighted
        attributes (features, or consumed items for Indirect-Direct).
        """
        st = self._state(type_id)
        direct = st.model_kind.direct_users
        if direct and not isinstance(user, EntityId):
            raise TypeError(f"{st.model_kind.value} resolves users by id")
        if not direct and isinstance(user, EntityId):
            raise TypeError(f"{st.model_kind.value} resolves users from weighted attributes")
        with st.lock:
            version = st.in_use
            if version is None:
                return None
            if direct:
                vec = self._lookup(st, version, user)
            else:
                if not user:
                    return None
                vec = weighted_sum(type_id.dimension, user, lambda e: self._lookup(st, version, e)).vector
            if vec is None:
                return None
            return UserEmbedding(version, vec)

    def item_embedding(
        self, type_id: EmbeddingTypeId, version: EmbeddingVersion, item_id: str, attributes: Mapping[str, float]
    ) -> Vector | None:
        """Indexer-side convenience: by id for direct items, by aggregation otherwise."""
        if self._state(type_id).model_kind.direct_items:
            return self.get_entity_embedding(type_id, version, EntityId.item(item_id))
        if not attributes:
            return None
        attrs = {EntityId.attribute(a): float(w) for a, w in attributes.items()}
        return self.aggregate_embedding(type_id, version, attrs).vector
