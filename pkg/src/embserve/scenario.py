"""Scenario files for the simulator.

A scenario is a JSON object; see ``docs/scenario.md`` for the schema. The
universe may be listed explicitly or generated from a ``synthetic`` block,
which is expanded deterministically with the splitmix64 stream.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from embserve.catalog import CatalogItem, Universe, UserProfile
from embserve.errors import InvalidScenario
from embserve.hashing import SplitMix64
from embserve.serving import PublisherRules
from embserve.store import EmbeddingTypeId, EntityId
from embserve.trainer import EmbeddingSource, ModelKind, TrainerConfig


@dataclass(frozen=True)
class Cadence:
    """An actor is due every ``every`` scheduler opportunities, starting at ``start``."""

    start: int = 0
    every: int = 1

    def __post_init__(self) -> None:
        if self.start < 0 or self.every < 1:
            raise InvalidScenario(f"bad cadence start={self.start} every={self.every}")


@dataclass(frozen=True)
class FaultSpec:
    cycle: int
    step: int
    target: str = "eo"  # "eo" or "engine"

    def __post_init__(self) -> None:
        if self.target not in ("eo", "engine"):
            raise InvalidScenario(f"fault target must be 'eo' or 'engine', got {self.target!r}")


@dataclass(frozen=True)
class Scenario:
    name: str
    model_kind: ModelKind
    types: tuple[EmbeddingTypeId, ...]
    universe: Universe
    trainer_configs: tuple[TrainerConfig, ...]
    trainer_cycles: int
    trainer_cadence: Cadence
    poll_cadence: Cadence
    cache_capacity: int
    index_mode: str
    index_cycles: int
    index_cadence: Cadence
    shadow_index_both_versions: bool
    request_count: int
    request_cadence: Cadence
    request_k: int
    request_users: tuple[str, ...]
    request_publishers: tuple[str, ...]
    publisher_rules: Mapping[str, PublisherRules]
    fallback_weight: float
    interleaving_seed: int
    faults: tuple[FaultSpec, ...] = ()
    max_opportunities: int = 1_000_000
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Scenario:
        try:
            return _parse(data)
        except InvalidScenario:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScenario(f"{type(exc).__name__}: {exc}") from None

    def with_overrides(self, **changes: Any) -> Scenario:
        """Re-parse with top-level keys replaced (keeps ``raw`` in sync)."""
        data = copy.deepcopy(dict(self.raw))
        for key, value in changes.items():
            if isinstance(value, Mapping) and isinstance(data.get(key), Mapping):
                merged = dict(data[key])
                merged.update(value)
                data[key] = merged
            else:
                data[key] = value
        return Scenario.from_dict(data)


def load_scenario(path: str | os.PathLike) -> Scenario:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise InvalidScenario(f"{path}: {exc}") from None
    return Scenario.from_dict(data)


def _cadence(block: Mapping[str, Any], default_every: int = 1) -> Cadence:
    return Cadence(int(block.get("start", 0)), int(block.get("cadence", default_every)))


def _entity_ref(ref: str) -> EntityId:
    kind, sep, ident = ref.partition(":")
    if not sep:
        raise InvalidScenario(f"fixture key {ref!r} must look like 'kind:id'")
    return EntityId(kind, ident)


def _fixture_map(block: Mapping[str, Any]) -> dict[EntityId, list[float]]:
    return {_entity_ref(k): [float(x) for x in v] for k, v in block.items()}


def synthesize_universe(spec: Mapping[str, Any]) -> Universe:
    """Deterministic random universe from a ``synthetic`` block."""
    rng = SplitMix64(int(spec.get("seed", 0)))
    n_users = int(spec.get("users", 20))
    n_items = int(spec.get("items", 50))
    n_attrs = int(spec.get("attributes", 12))
    n_providers = int(spec.get("providers", 6))
    regions = list(spec.get("regions", ["US", "FR", "DE"]))
    targeted = float(spec.get("targeted_fraction", 0.3))
    attrs_per_item = int(spec.get("attributes_per_item", 3))
    late = int(spec.get("late_items", 0))
    removed = int(spec.get("removed_items", 0))
    late_cycle = int(spec.get("late_cycle", 1))
    removal_cycle = int(spec.get("removal_cycle", 2))
    if n_attrs < 1 or n_providers < 1 or not regions:
        raise InvalidScenario("synthetic universe needs attributes, providers and regions")
    if late + removed > n_items:
        raise InvalidScenario("late_items + removed_items exceeds items")

    attributes = tuple(f"a{j:02d}" for j in range(n_attrs))

    def pick_weights(count: int, pool: list[str]) -> dict[str, float]:
        out: dict[str, float] = {}
        count = min(count, len(pool))
        while len(out) < count:
            out[pool[rng.below(len(pool))]] = round(0.05 + 0.95 * rng.unit(), 6)
        return out

    items = []
    for i in range(n_items):
        provider = f"p{rng.below(n_providers)}"
        geo: frozenset[str] = frozenset()
        if rng.unit() < targeted:
            geo = frozenset({regions[rng.below(len(regions))], regions[rng.below(len(regions))]})
        attrs = pick_weights(1 + rng.below(attrs_per_item), list(attributes))
        added = late_cycle if i >= n_items - late else 0
        gone = removal_cycle if i < removed else None
        items.append(CatalogItem(f"i{i:03d}", provider, geo, attrs, added, gone))
    item_ids = [it.item_id for it in items]
    users = []
    for u in range(n_users):
        attrs = pick_weights(1 + rng.below(4), list(attributes))
        consumed = pick_weights(1 + rng.below(3), item_ids)
        users.append(UserProfile(f"u{u:03d}", attrs, consumed, regions[rng.below(len(regions))]))
    return Universe(tuple(users), tuple(items), attributes)


def _explicit_universe(block: Mapping[str, Any]) -> Universe:
    attributes = tuple(block.get("attributes", ()))
    items = tuple(
        CatalogItem(
            item_id=row["id"],
            provider_id=row["provider"],
            geo_targets=frozenset(row.get("geo", ())),
            attributes={k: float(v) for k, v in row.get("attrs", {}).items()},
            added_at_cycle=int(row.get("added_at_cycle", 0)),
            removed_at_cycle=row.get("removed_at_cycle"),
        )
        for row in block.get("items", ())
    )
    users = tuple(
        UserProfile(
            user_id=row["id"],
            attributes={k: float(v) for k, v in row.get("attrs", {}).items()},
            consumed={k: float(v) for k, v in row.get("consumed", {}).items()},
            geo=row.get("geo", ""),
        )
        for row in block.get("users", ())
    )
    return Universe(users, items, attributes)


def _parse(data: Mapping[str, Any]) -> Scenario:
    model_kind = ModelKind(data["model_kind"])
    types = tuple(
        EmbeddingTypeId(t["algo"], t["config"], int(t["dim"])) for t in data["embedding_types"]
    )
    if not types:
        raise InvalidScenario("at least one embedding type is required")
    if len({t.name for t in types}) != len(types):
        raise InvalidScenario("embedding types must have distinct (algo, config)")

    ublock = data.get("universe", {})
    universe = synthesize_universe(ublock["synthetic"]) if "synthetic" in ublock else _explicit_universe(ublock)

    tblock = data.get("trainer", {})
    source = EmbeddingSource(tblock.get("source", "hashed"))
    fixtures_raw = data.get("fixtures", {})
    flat: dict[EntityId, list[float]] = {}
    by_tf: dict[int, dict[EntityId, list[float]]] = {}
    for key, value in fixtures_raw.items():
        if key.isdigit():
            by_tf[int(key)] = _fixture_map(value)
        else:
            flat[_entity_ref(key)] = [float(x) for x in value]
    if source is EmbeddingSource.FIXTURE and len(types) != 1:
        raise InvalidScenario("fixture embeddings are only supported with a single embedding type")
    configs = tuple(
        TrainerConfig(
            model_kind=model_kind,
            type_id=t,
            embedding_source=source,
            coverage_fraction=float(tblock.get("coverage", 1.0)),
            seed=int(tblock.get("seed", 0)),
            fixtures=flat,
            fixtures_by_time_frame=by_tf,
        )
        for t in types
    )

    eblock = data.get("eo", {})
    iblock = data.get("index", {})
    index_mode = iblock.get("mode", "shadow")
    if index_mode not in ("shadow", "incremental"):
        raise InvalidScenario(f"index mode must be shadow or incremental, got {index_mode!r}")
    rblock = data.get("requests", {})
    users = tuple(rblock.get("users", [u.user_id for u in universe.users]))
    known_users = {u.user_id for u in universe.users}
    if not set(users) <= known_users:
        raise InvalidScenario(f"requests reference unknown users {sorted(set(users) - known_users)}")
    request_count = int(rblock.get("count", 0))
    if request_count and not users:
        raise InvalidScenario("requests need at least one user")
    rules = {
        pub: PublisherRules(pub, frozenset(blocked)) for pub, blocked in data.get("publishers", {}).items()
    }
    publishers = tuple(rblock.get("publishers", sorted(rules)))
    faults = tuple(
        FaultSpec(int(f["cycle"]), int(f["step"]), f.get("target", "eo")) for f in data.get("faults", ())
    )
    k = int(rblock.get("k", 10))
    if k < 1:
        raise InvalidScenario("requests.k must be >= 1")
    return Scenario(
        name=str(data.get("name", "scenario")),
        model_kind=model_kind,
        types=types,
        universe=universe,
        trainer_configs=configs,
        trainer_cycles=int(tblock.get("cycles", 0)),
        trainer_cadence=_cadence(tblock, 100),
        poll_cadence=Cadence(int(eblock.get("poll_start", 0)), int(eblock.get("poll_cadence", 10))),
        cache_capacity=int(eblock.get("cache_capacity", 4096)),
        index_mode=index_mode,
        index_cycles=int(iblock.get("cycles", 0)),
        index_cadence=_cadence(iblock, 100),
        shadow_index_both_versions=bool(iblock.get("shadow_index_both_versions", False)),
        request_count=request_count,
        request_cadence=_cadence(rblock, 1),
        request_k=k,
        request_users=users,
        request_publishers=publishers,
        publisher_rules=rules,
        fallback_weight=float(data.get("fallback_weight", 1.0)),
        interleaving_seed=int(data.get("interleaving_seed", 0)),
        faults=faults,
        max_opportunities=int(data.get("max_opportunities", 1_000_000)),
        raw=copy.deepcopy(dict(data)),
    )


def dump_scenario(scenario: Scenario, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(scenario.raw, indent=2, sort_keys=True) + "\n", encoding="utf-8")
