"""Entity universe: users, catalog items and the attribute vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from embserve.errors import InvalidScenario
from embserve.store import EntityId

# attribute id -> weight
WeightedAttributes = Mapping[str, float]


@dataclass(frozen=True)
class CatalogItem:
    """The non-embedding part of an item: filter fields and semantic features."""

    item_id: str
    provider_id: str
    geo_targets: frozenset[str] = frozenset()
    attributes: Mapping[str, float] = field(default_factory=dict)
    # index-cycle ordinals bounding catalog membership; None = never removed
    added_at_cycle: int = 0
    removed_at_cycle: int | None = None

    @property
    def entity(self) -> EntityId:
        return EntityId.item(self.item_id)

    def live_at(self, cycle: int) -> bool:
        if cycle < self.added_at_cycle:
            return False
        return self.removed_at_cycle is None or cycle < self.removed_at_cycle


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    attributes: Mapping[str, float] = field(default_factory=dict)
    # consumed item id -> weight; the user side of Indirect-Direct models
    consumed: Mapping[str, float] = field(default_factory=dict)
    geo: str = ""

    @property
    def entity(self) -> EntityId:
        return EntityId.user(self.user_id)


@dataclass(frozen=True)
class Universe:
    users: tuple[UserProfile, ...] = ()
    items: tuple[CatalogItem, ...] = ()
    attributes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for what, ids in (
            ("user", [u.user_id for u in self.users]),
            ("item", [i.item_id for i in self.items]),
            ("attribute", list(self.attributes)),
        ):
            if len(set(ids)) != len(ids):
                raise InvalidScenario(f"duplicate {what} id in universe")
        vocab = set(self.attributes)
        items = {i.item_id for i in self.items}
        for item in self.items:
            unknown = set(item.attributes) - vocab
            if unknown:
                raise InvalidScenario(f"item {item.item_id} uses unknown attributes {sorted(unknown)}")
        for user in self.users:
            unknown = set(user.attributes) - vocab
            if unknown:
                raise InvalidScenario(f"user {user.user_id} uses unknown attributes {sorted(unknown)}")
            missing = set(user.consumed) - items
            if missing:
                raise InvalidScenario(f"user {user.user_id} consumed unknown items {sorted(missing)}")

    def item(self, item_id: str) -> CatalogItem:
        return self._items_by_id[item_id]

    def user(self, user_id: str) -> UserProfile:
        return self._users_by_id[user_id]

    @property
    def _items_by_id(self) -> dict[str, CatalogItem]:
        cached = self.__dict__.get("_items_cache")
        if cached is None:
            cached = {i.item_id: i for i in self.items}
            object.__setattr__(self, "_items_cache", cached)
        return cached

    @property
    def _users_by_id(self) -> dict[str, UserProfile]:
        cached = self.__dict__.get("_users_cache")
        if cached is None:
            cached = {u.user_id: u for u in self.users}
            object.__setattr__(self, "_users_cache", cached)
        return cached

    def catalog_at(self, cycle: int) -> list[CatalogItem]:
        """Items in the catalog snapshot seen by index cycle ``cycle``."""
        return [i for i in self.items if i.live_at(cycle)]

    def tombstones_at(self, cycle: int) -> list[str]:
        return [i.item_id for i in self.items if i.removed_at_cycle is not None and i.removed_at_cycle <= cycle]


def attribute_entities(attrs: WeightedAttributes) -> dict[EntityId, float]:
    return {EntityId.attribute(a): float(w) for a, w in attrs.items()}


def item_entities(weights: Mapping[str, float]) -> dict[EntityId, float]:
    return {EntityId.item(i): float(w) for i, w in weights.items()}
