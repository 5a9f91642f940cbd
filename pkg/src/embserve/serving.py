"""Serving layer: user request -> EO resolution -> filtered query -> ranked results.

The serving layer never picks an embedding version. It asks the EO for a
user embedding by type only and passes whatever version comes back straight
into the query.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from embserve.catalog import attribute_entities, item_entities
from embserve.engine import RecommendationQuery, ScoredResult, SearchEngine
from embserve.orchestrator import EmbeddingsOrchestrator, UserEmbedding
from embserve.store import EmbeddingTypeId, EntityId
from embserve.trainer import ModelKind


@dataclass(frozen=True)
class UserRequest:
    user_id: str
    user_attributes: Mapping[str, float] = field(default_factory=dict)
    user_geo: str = ""
    publisher_id: str = ""
    k: int = 10
    # consumed item id -> weight; only read for Indirect-Direct models
    consumed_items: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.k, int) or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")


@dataclass(frozen=True)
class PublisherRules:
    publisher_id: str
    blocked_providers: frozenset[str] = frozenset()


def user_key(model_kind: ModelKind, req: UserRequest) -> EntityId | dict[EntityId, float]:
    """What the EO needs to resolve this user under ``model_kind``."""
    if model_kind is ModelKind.DIRECT_DIRECT:
        return EntityId.user(req.user_id)
    if model_kind is ModelKind.INDIRECT_DIRECT:
        return item_entities(req.consumed_items)
    return attribute_entities(req.user_attributes)


def build_query(
    req: UserRequest,
    type_id: EmbeddingTypeId,
    eo_response: UserEmbedding | None,
    rules: PublisherRules | None = None,
) -> RecommendationQuery:
    blocked = rules.blocked_providers if rules is not None else frozenset()
    if eo_response is None:
        return RecommendationQuery(
            type_id=type_id,
            user_attributes=req.user_attributes,
            user_geo=req.user_geo,
            publisher_blocked_providers=blocked,
            k=req.k,
        )
    return RecommendationQuery(
        type_id=type_id,
        user_version=eo_response.version,
        user_vector=eo_response.vector,
        user_attributes=req.user_attributes,
        user_geo=req.user_geo,
        publisher_blocked_providers=blocked,
        k=req.k,
    )


class ServingLayer:
    def __init__(
        self,
        eo: EmbeddingsOrchestrator,
        engine: SearchEngine,
        publisher_rules: Mapping[str, PublisherRules] | None = None,
    ) -> None:
        self.eo = eo
        self.engine = engine
        self.publisher_rules = dict(publisher_rules or {})
        self._user_ids: dict[str, EntityId] = {}

    def resolve(self, req: UserRequest, type_id: EmbeddingTypeId) -> tuple[UserEmbedding | None, RecommendationQuery]:
        """One atomic EO resolution, then pure query assembly."""
        kind = self.eo.model_kind(type_id)
        if kind is ModelKind.DIRECT_DIRECT:
            key = self._user_ids.get(req.user_id)
            if key is None:
                key = self._user_ids[req.user_id] = EntityId.user(req.user_id)
        else:
            key = user_key(kind, req)
        response = self.eo.get_user_embedding(type_id, key)
        return response, build_query(req, type_id, response, self.publisher_rules.get(req.publisher_id))

    def recommend(self, req: UserRequest, type_id: EmbeddingTypeId) -> list[ScoredResult]:
        _, query = self.resolve(req, type_id)
        return self.engine.execute_query(query)
