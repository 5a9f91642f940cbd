"""Indexing layer: shadow rebuilds and two-version incremental mini-batches.

Every cycle is written as a generator that performs one externally visible
step per ``next()`` and yields a label for it, so a scheduler can interleave
other actors between any two steps. :meth:`Indexer.run_shadow_cycle` and
:meth:`Indexer.run_incremental_batch` simply drive a cycle to completion.

A cycle that hits :class:`ServiceUnavailable` aborts: nothing after the
failing step runs, in particular the in-use trigger, and the report comes
back with ``aborted=True``. A trigger the EO rejects (the version regressed
or vanished underneath the cycle) ends the cycle the same way.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Generator, Iterable, Sequence

from embserve.catalog import CatalogItem, Universe
from embserve.engine import IndexedDocument, SearchEngine
from embserve.errors import RegressingVersion, ServiceUnavailable, UnknownItem, UnknownVersion, WrongIndexMode
from embserve.orchestrator import EmbeddingsOrchestrator
from embserve.store import EmbeddingTypeId, EmbeddingVersion, EntityId
from embserve.trainer import changed_entities

log = logging.getLogger(__name__)

CycleSteps = Generator[str, None, "IndexCycleReport"]

_ABORTING = (ServiceUnavailable, RegressingVersion, UnknownVersion)


@dataclass
class IndexCycleReport:
    mode: str
    cycle: int = 0
    versions_indexed: list[EmbeddingVersion] = field(default_factory=list)
    items_total: int = 0
    items_with_embedding: dict[str, int] = field(default_factory=dict)
    items_fallback_only: dict[str, int] = field(default_factory=dict)
    items_deleted: int = 0
    unknown_deletes: list[str] = field(default_factory=list)
    indexed_items: list[str] = field(default_factory=list)
    triggered_in_use: bool = False
    aborted: bool = False
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "cycle": self.cycle,
            "versions_indexed": [v.key for v in self.versions_indexed],
            "items_total": self.items_total,
            "items_with_embedding": dict(sorted(self.items_with_embedding.items())),
            "items_fallback_only": dict(sorted(self.items_fallback_only.items())),
            "items_deleted": self.items_deleted,
            "unknown_deletes": list(self.unknown_deletes),
            "triggered_in_use": self.triggered_in_use,
            "aborted": self.aborted,
            "error": self.error,
        }


@dataclass(frozen=True)
class ChangeSet:
    upserts: tuple[CatalogItem, ...] = ()
    deletions: tuple[str, ...] = ()


def _drive(steps: CycleSteps) -> IndexCycleReport:
    while True:
        try:
            next(steps)
        except StopIteration as stop:
            return stop.value


class Indexer:
    """Runs one indexing cycle at a time against one engine.

    ``eo`` and ``engine`` are used only through their public methods, so the
    simulator can hand in fault-injecting proxies.
    """

    def __init__(
        self,
        eo: EmbeddingsOrchestrator,
        engine: SearchEngine,
        *,
        shadow_index_both_versions: bool = False,
    ) -> None:
        self.eo = eo
        self.engine = engine
        self.shadow_index_both_versions = shadow_index_both_versions
        self._cycle_lock = threading.Lock()
        self._cycles = 0
        # per type: latest tf covered by the last successful incremental batch
        self.watermarks: dict[EmbeddingTypeId, int] = {}

    # -- helpers -------------------------------------------------------------

    def _build_document(
        self, item: CatalogItem, wanted: dict[EmbeddingTypeId, list[EmbeddingVersion]]
    ) -> IndexedDocument:
        vectors = {}
        for type_id, versions in wanted.items():
            for version in versions:
                vec = self.eo.item_embedding(type_id, version, item.item_id, item.attributes)
                if vec is not None:
                    vectors[version] = vec
        return IndexedDocument(item.item_id, item.provider_id, item.geo_targets, item.attributes, vectors)

    @staticmethod
    def _count(report: IndexCycleReport, doc: IndexedDocument, latest: dict[EmbeddingTypeId, EmbeddingVersion | None]) -> None:
        for type_id, version in latest.items():
            bucket = report.items_with_embedding if version is not None and version in doc.vectors else report.items_fallback_only
            bucket[type_id.key] = bucket.get(type_id.key, 0) + 1

    def _claim(self) -> int:
        if not self._cycle_lock.acquire(blocking=False):
            raise RuntimeError("an indexing cycle is already running on this engine")
        cycle = self._cycles
        self._cycles += 1
        return cycle

    # -- shadowing -----------------------------------------------------------

    def shadow_cycle(self, catalog: Sequence[CatalogItem], type_ids: Sequence[EmbeddingTypeId]) -> CycleSteps:
        if self.engine.mode != "shadow":
            raise WrongIndexMode("shadow cycles need a shadow-mode engine")
        cycle = self._claim()
        report = IndexCycleReport(mode="shadow", cycle=cycle)
        try:
            latest: dict[EmbeddingTypeId, EmbeddingVersion | None] = {}
            wanted: dict[EmbeddingTypeId, list[EmbeddingVersion]] = {}
            for t in type_ids:
                states = self.eo.get_states(t)
                latest[t] = states.latest
                versions = [states.latest] if states.latest is not None else []
                if self.shadow_index_both_versions and states.in_use is not None and states.in_use not in versions:
                    versions.append(states.in_use)
                wanted[t] = versions
            report.versions_indexed = [v for v in latest.values() if v is not None]
            yield "read_latest"

            docs = []
            for item in catalog:
                doc = self._build_document(item, wanted)
                docs.append(doc)
                self._count(report, doc, latest)
                report.indexed_items.append(item.item_id)
                report.items_total = len(report.indexed_items)
                yield f"index_item:{item.item_id}"

            generation = self.engine.build_generation(docs)
            yield "seal"

            self.engine.swap_generation(generation)
            yield "swap"

            for t, version in latest.items():
                if version is None:
                    continue
                self.eo.set_version_in_use(t, version)
                report.triggered_in_use = True
                yield f"trigger:{t.key}"
        except _ABORTING as exc:
            report.aborted = True
            report.error = exc.code
            log.info("shadow cycle %d aborted: %s", cycle, exc.code)
        finally:
            self._cycle_lock.release()
        return report

    def run_shadow_cycle(self, catalog: Sequence[CatalogItem], type_ids: Sequence[EmbeddingTypeId]) -> IndexCycleReport:
        return _drive(self.shadow_cycle(catalog, type_ids))

    # -- incremental ---------------------------------------------------------

    def derive_change_set(
        self,
        universe: Universe,
        cycle: int,
        type_ids: Iterable[EmbeddingTypeId],
        latest: dict[EmbeddingTypeId, EmbeddingVersion | None],
    ) -> ChangeSet:
        """New catalog items, items with a fresh embedding since the watermark, and tombstones."""
        live = {d.item_id for d in self.engine.documents()}
        catalog = universe.catalog_at(cycle)
        changed_items: set[str] = set()
        changed_attrs: set[str] = set()
        for t in type_ids:
            version = latest.get(t)
            if version is None:
                continue
            since = self.watermarks.get(t)
            for entity in changed_entities(self.eo.store, t, since, version.time_frame):
                if entity.kind.value == "item":
                    changed_items.add(entity.id)
                elif entity.kind.value == "attribute":
                    changed_attrs.add(entity.id)
        upserts = tuple(
            item
            for item in catalog
            if item.item_id not in live
            or item.item_id in changed_items
            or (changed_attrs and not changed_attrs.isdisjoint(item.attributes))
        )
        deletions = tuple(sorted(i for i in universe.tombstones_at(cycle) if i in live))
        return ChangeSet(upserts, deletions)

    def incremental_batch(
        self,
        change_set: ChangeSet | None,
        type_ids: Sequence[EmbeddingTypeId],
        *,
        universe: Universe | None = None,
        catalog_cycle: int | None = None,
    ) -> CycleSteps:
        """One mini-batch. With ``change_set=None`` it is derived after reading the states."""
        if self.engine.mode != "incremental":
            raise WrongIndexMode("incremental batches need an incremental-mode engine")
        cycle = self._claim()
        report = IndexCycleReport(mode="incremental", cycle=cycle)
        try:
            latest: dict[EmbeddingTypeId, EmbeddingVersion | None] = {}
            wanted: dict[EmbeddingTypeId, list[EmbeddingVersion]] = {}
            for t in type_ids:
                states = self.eo.get_states(t)
                latest[t] = states.latest
                versions = [v for v in (states.in_use, states.latest) if v is not None]
                wanted[t] = sorted(set(versions))
                report.versions_indexed.extend(wanted[t])
            if change_set is None:
                if universe is None:
                    raise ValueError("universe is required to derive the change set")
                change_set = self.derive_change_set(
                    universe, cycle if catalog_cycle is None else catalog_cycle, type_ids, latest
                )
            yield "read_states"

            for item in change_set.upserts:
                doc = self._build_document(item, wanted)
                self.engine.upsert_document(doc)
                self._count(report, doc, latest)
                report.indexed_items.append(item.item_id)
                report.items_total = len(report.indexed_items)
                yield f"upsert:{item.item_id}"

            for item_id in change_set.deletions:
                try:
                    self.engine.delete_document(item_id)
                    report.items_deleted += 1
                except UnknownItem:
                    report.unknown_deletes.append(item_id)
                yield f"delete:{item_id}"

            for t, version in latest.items():
                if version is None:
                    continue
                self.eo.set_version_in_use(t, version)
                self.watermarks[t] = version.time_frame
                report.triggered_in_use = True
                yield f"trigger:{t.key}"
        except _ABORTING as exc:
            report.aborted = True
            report.error = exc.code
            log.info("incremental batch %d aborted: %s", cycle, exc.code)
        finally:
            self._cycle_lock.release()
        return report

    def run_incremental_batch(
        self,
        change_set: ChangeSet | None,
        type_ids: Sequence[EmbeddingTypeId],
        **kwargs,
    ) -> IndexCycleReport:
        return _drive(self.incremental_batch(change_set, type_ids, **kwargs))
