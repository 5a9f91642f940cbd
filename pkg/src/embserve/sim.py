"""Deterministic discrete-event simulation of trainer, EO, indexer and serving.

A single-threaded scheduler advances a step counter. At each opportunity it
collects the actors whose cadence makes them due and picks one with a
splitmix64 stream seeded by the interleaving seed. Indexing cycles are
resumable generators, so the scheduler can interleave other actors between
any two indexer steps (between upserts, between swap and trigger).

After every step the invariant suite is evaluated from observable state:
the EO's version states, the index contents, the store, and the step's own
outputs. The run produces a JSON report with sorted keys; replaying the
recorded trace must reproduce it byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from embserve.catalog import UserProfile
from embserve.engine import EMBEDDING, FALLBACK, IndexedDocument, RecommendationQuery, SearchEngine, brute_force_oracle
from embserve.errors import EngineUnavailable, EOUnavailable, ReplayDivergence
from embserve.hashing import SplitMix64, splitmix64
from embserve.indexer import IndexCycleReport, Indexer
from embserve.orchestrator import EmbeddingsOrchestrator
from embserve.scenario import Scenario
from embserve.serving import ServingLayer, UserRequest
from embserve.store import EmbeddingStore, EmbeddingTypeId, EmbeddingVersion, EntityId
from embserve.trainer import ModelKind, Trainer

log = logging.getLogger(__name__)

ACTORS = ("trainer", "eo", "indexer", "serving")
INVARIANTS = (
    "version_match",
    "version_pass_through",
    "two_version_safety",
    "monotonicity",
    "trigger_exclusivity",
    "abort_safety",
    "filter_soundness",
    "generation_isolation",
    "report_consistency",
    "model_kind_discipline",
    "monotone_freshness",
)
_REQUEST_SALT = 0x5EED5EED


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class FaultProxy:
    """Forwards to ``target``; while ``armed`` every method call raises ``error``."""

    def __init__(self, target: Any, error: type[Exception]) -> None:
        self._target = target
        self._error = error
        self.armed = False

    def __getattr__(self, name: str) -> Any:
        attr = getattr(self._target, name)
        if not callable(attr):
            return attr

        def call(*args: Any, **kwargs: Any) -> Any:
            if self.armed:
                raise self._error(f"injected failure in {name}")
            return attr(*args, **kwargs)

        return call


@dataclass(frozen=True, slots=True)
class TraceEvent:
    step: int
    t: int
    actor: str
    action: str
    digest: str

    def to_json(self) -> dict:
        return {"step": self.step, "t": self.t, "actor": self.actor, "action": self.action, "digest": self.digest}


class _Clock:
    __slots__ = ("next_due", "every", "remaining")

    def __init__(self, start: int, every: int, remaining: int | None) -> None:
        self.next_due = start
        self.every = every
        self.remaining = remaining  # None = unbounded


class Simulation:
    def __init__(
        self,
        scenario: Scenario,
        seed: int | None = None,
        *,
        record_trace: bool = True,
        schedule: list[tuple[int, str, str, str]] | None = None,
        training_cache: dict | None = None,
    ) -> None:
        self.scenario = scenario
        self.seed = scenario.interleaving_seed if seed is None else seed
        self.record_trace = record_trace
        self._schedule = schedule

        self.store = EmbeddingStore()
        self.trainers = [Trainer(self.store, cfg, training_cache) for cfg in scenario.trainer_configs]
        self.types: list[EmbeddingTypeId] = list(scenario.types)
        self.eo = EmbeddingsOrchestrator(
            self.store, {t: scenario.model_kind for t in self.types}, scenario.cache_capacity
        )
        self.engine = SearchEngine(scenario.index_mode, scenario.fallback_weight)
        self.eo_proxy = FaultProxy(self.eo, EOUnavailable)
        self.engine_proxy = FaultProxy(self.engine, EngineUnavailable)
        self.indexer = Indexer(
            self.eo_proxy, self.engine_proxy, shadow_index_both_versions=scenario.shadow_index_both_versions
        )
        self.serving = ServingLayer(self.eo, self.engine, scenario.publisher_rules)

        self.sched_rng = SplitMix64(self.seed)
        self.req_rng = SplitMix64(splitmix64(self.seed ^ _REQUEST_SALT))
        self.clocks = {
            "trainer": _Clock(scenario.trainer_cadence.start, scenario.trainer_cadence.every, scenario.trainer_cycles),
            "eo": _Clock(scenario.poll_cadence.start, scenario.poll_cadence.every, None),
            "indexer": _Clock(scenario.index_cadence.start, scenario.index_cadence.every, scenario.index_cycles),
            "serving": _Clock(scenario.request_cadence.start, scenario.request_cadence.every, scenario.request_count),
        }
        self._faults = {(f.cycle, f.step): f.target for f in scenario.faults}
        self._request_cache: dict[tuple[str, str], UserRequest] = {}
        self._users: dict[str, UserProfile] = {u.user_id: u for u in scenario.universe.users}
        self._items = {i.item_id: i for i in scenario.universe.items}
        self._entities: dict[str, EntityId] = {}
        self._allowed: dict[tuple, frozenset[str]] = {}
        self._versioned: dict[tuple, tuple] = {}

        # indexer cycle in flight
        self._cycle = None
        self._cycle_no = -1
        self._cycle_step = 0
        self._cycle_in_use_at_start: dict[EmbeddingTypeId, EmbeddingVersion | None] = {}
        self._cycle_generation = None

        self.trace: list[TraceEvent] = []
        self._trace_hash = hashlib.blake2b(digest_size=16)
        self.step = 0
        self.t = 0

        self.violations = {name: 0 for name in INVARIANTS}
        self.checks = {name: 0 for name in INVARIANTS}
        self.first_violation: dict | None = None
        self.counters = {
            "trainer_cycles": 0,
            "records_written": 0,
            "polls": 0,
            "index_cycles": 0,
            "index_steps": 0,
            "aborted_cycles": 0,
            "requests": 0,
            "requests_with_user_vector": 0,
            "results_embedding": 0,
            "results_fallback": 0,
            "in_use_transitions": 0,
            "faults_armed": 0,
        }
        self.window = {
            "windows_opened": 0,
            "window_steps": 0,
            "max_window_steps": 0,
            "fallback_in_window": 0,
            "fallback_outside_window": 0,
            "requests_in_window": 0,
        }
        self._window_open: dict[EmbeddingTypeId, int] = {}  # type -> step the window opened
        self.cycle_reports: list[dict] = []
        self._states = {t: (None, None) for t in self.types}
        self._two_version_memo: tuple | None = None
        self._last_freshness: dict[EmbeddingTypeId, int | None] = {t: None for t in self.types}
        self._finished = False
        self._work_clocks = [self.clocks[a] for a in ("trainer", "indexer", "serving")]

    # -- scheduling ----------------------------------------------------------

    def _has_work(self, actor: str) -> bool:
        if actor == "indexer" and self._cycle is not None:
            return True
        clock = self.clocks[actor]
        return clock.remaining is None or clock.remaining > 0

    def _work_left(self) -> bool:
        return self._cycle is not None or any(
            c.remaining is None or c.remaining > 0 for c in self._work_clocks
        )

    def enabled(self, t: int) -> list[str]:
        out = []
        clocks = self.clocks
        work_left = self._work_left()
        for actor in ACTORS:
            if actor == "eo":
                if work_left and t >= clocks["eo"].next_due:
                    out.append(actor)
            elif actor == "indexer" and self._cycle is not None:
                out.append(actor)
            elif t >= clocks[actor].next_due and self._has_work(actor):
                out.append(actor)
        return out

    def _next_wakeup(self) -> int:
        dues = [self.clocks[a].next_due for a in ("trainer", "indexer", "serving") if self._has_work(a)]
        return max(self.t + 1, min(dues))

    def run(self) -> dict:
        if self._schedule is not None:
            return self._replay()
        limit = self.scenario.max_opportunities
        while self._work_left():
            if self.t > limit:
                self._violate("monotonicity", f"scenario did not finish within {limit} opportunities")
                break
            en = self.enabled(self.t)
            if not en:
                self.t = self._next_wakeup()
                continue
            actor = en[self.sched_rng.below(len(en))] if len(en) > 1 else en[0]
            self._execute(actor)
            self.t += 1
        return self._finish()

    def _replay(self) -> dict:
        for i, (t, actor, action, digest) in enumerate(self._schedule):
            if t < self.t or actor not in self.enabled(t):
                raise ReplayDivergence(f"event {i}: actor {actor} is not enabled at t={t}")
            self.t = t
            event = self._execute(actor)
            if event.action != action or event.digest != digest:
                raise ReplayDivergence(
                    f"event {i}: recorded {actor}/{action}#{digest}, replay produced {event.action}#{event.digest}"
                )
            self.t += 1
        if self._work_left():
            raise ReplayDivergence("trace ended before the scenario finished")
        return self._finish()

    # -- steps ---------------------------------------------------------------

    def _execute(self, actor: str) -> TraceEvent:
        epoch = self.eo.state_epoch
        if actor == "trainer":
            action, payload = self._step_trainer()
        elif actor == "eo":
            action, payload = self._step_poll()
        elif actor == "indexer":
            action, payload = self._step_indexer()
        else:
            action, payload = self._step_serving()
        if self.eo.state_epoch != epoch:
            self._check_states(actor, action)
        self._check_two_version_safety()
        event = self._record(actor, action, payload)
        self.step += 1
        return event

    def _record(self, actor: str, action: str, payload: Any) -> TraceEvent:
        data = payload if isinstance(payload, bytes) else repr(payload).encode("utf-8")
        digest = hashlib.blake2b(data, digest_size=8).hexdigest()
        event = TraceEvent(self.step, self.t, actor, action, digest)
        self._trace_hash.update(f"{event.step}|{event.t}|{actor}|{action}|{digest}\n".encode("utf-8"))
        if self.record_trace:
            self.trace.append(event)
        return event

    def _step_trainer(self) -> tuple[str, Any]:
        clock = self.clocks["trainer"]
        clock.remaining -= 1
        clock.next_due = self.t + clock.every
        written = []
        for trainer in self.trainers:
            type_id = trainer.config.type_id
            tf, n = trainer.next_cycle(self.scenario.universe)
            written.append((type_id.key, tf, n))
            self.counters["records_written"] += n
            # only the model kind's entity kinds may appear under the new version
            allowed = self.scenario.model_kind.trained_kinds
            self.checks["model_kind_discipline"] += 1
            bad = [e for e in self.store.entities(EmbeddingVersion(type_id, tf)) if e.kind not in allowed]
            if bad:
                self._violate("model_kind_discipline", f"{type_id.key} tf {tf} wrote {bad[0]}")
            newest = self.store.max_time_frame(type_id)
            if n:
                self.checks["monotone_freshness"] += 1
                prev = self._last_freshness[type_id]
                if newest != tf or (prev is not None and newest <= prev):
                    self._violate("monotone_freshness", f"{type_id.key}: max tf {newest} after writing tf {tf}")
            self._last_freshness[type_id] = newest
        self.counters["trainer_cycles"] += 1
        return "train", tuple(written)

    def _step_poll(self) -> tuple[str, Any]:
        clock = self.clocks["eo"]
        clock.next_due = self.t + clock.every
        latest = self.eo.poll_all()
        self.counters["polls"] += 1
        return "poll", tuple((t.key, v.time_frame if v else None) for t, v in latest.items())

    def _step_indexer(self) -> tuple[str, Any]:
        clock = self.clocks["indexer"]
        if self._cycle is None:
            clock.remaining -= 1
            self._cycle_no += 1
            self._cycle_step = 0
            self._cycle_in_use_at_start = {t: self.eo.get_version_in_use(t) for t in self.types}
            universe = self.scenario.universe
            if self.engine.mode == "shadow":
                self._cycle = self.indexer.shadow_cycle(universe.catalog_at(self._cycle_no), self.types)
            else:
                self._cycle = self.indexer.incremental_batch(
                    None, self.types, universe=universe, catalog_cycle=self._cycle_no
                )
        target = self._faults.get((self._cycle_no, self._cycle_step))
        if target is not None:
            proxy = self.eo_proxy if target == "eo" else self.engine_proxy
            if not proxy.armed:
                proxy.armed = True
                self.counters["faults_armed"] += 1
        self._cycle_step += 1
        self.counters["index_steps"] += 1
        try:
            label = next(self._cycle)
        except StopIteration as stop:
            report: IndexCycleReport = stop.value
            self._cycle = None
            self.eo_proxy.armed = False
            self.engine_proxy.armed = False
            clock.next_due = self.t + clock.every
            self._end_cycle(report)
            return "cycle_end", canonical_json(report.to_json())
        if label == "swap":
            self._on_swap()
        return label, label

    def _end_cycle(self, report: IndexCycleReport) -> None:
        self.counters["index_cycles"] += 1
        self.cycle_reports.append(report.to_json())
        if report.aborted:
            self.counters["aborted_cycles"] += 1
            self.checks["abort_safety"] += 1
            for t in self.types:
                if self.eo.get_version_in_use(t) != self._cycle_in_use_at_start[t]:
                    self._violate("abort_safety", f"aborted cycle {report.cycle} moved in-use of {t.key}")
            # a partial report must still add up over what it did index
            self.checks["report_consistency"] += 1
            for t in self.types:
                got = report.items_with_embedding.get(t.key, 0) + report.items_fallback_only.get(t.key, 0)
                if got != report.items_total:
                    self._violate("report_consistency", f"aborted cycle {report.cycle} {t.key}: {got} != {report.items_total}")
            return
        # recount from the index itself
        self.checks["report_consistency"] += 1
        docs = {d.item_id: d for d in self.engine.documents()}
        latest = {v.type_id: v for v in report.versions_indexed}
        for t in self.types:
            version = latest.get(t)
            counted = [docs[i] for i in report.indexed_items if i in docs]
            if len(counted) != len(report.indexed_items) and report.mode == "shadow":
                self._violate("report_consistency", f"cycle {report.cycle}: indexed items missing from index")
            with_vec = sum(1 for d in counted if version is not None and version in d.vectors)
            if report.mode == "incremental":
                # a newer version may sit beside the in-use one; the report counts the latest
                newest = max((v for v in report.versions_indexed if v.type_id == t), default=None, key=lambda v: v.time_frame)
                with_vec = sum(1 for d in counted if newest is not None and newest in d.vectors)
            got = (report.items_with_embedding.get(t.key, 0), report.items_fallback_only.get(t.key, 0))
            if got != (with_vec, len(counted) - with_vec) or sum(got) != report.items_total:
                self._violate("report_consistency", f"cycle {report.cycle} {t.key}: report {got}, index {with_vec}/{len(counted)}")

    def _on_swap(self) -> None:
        live = self.engine.live
        for t in self.types:
            in_use = self.eo.get_version_in_use(t)
            if in_use is None:
                continue
            has_in_use = any(in_use in d.vectors for d in live.documents())
            embeddable = any(self._embeddable(in_use, d.item_id, d.attributes) for d in live.documents())
            if embeddable and not has_in_use and t not in self._window_open:
                self._window_open[t] = self.step
                self.window["windows_opened"] += 1
            elif has_in_use and t in self._window_open:
                self._close_window(t)

    def _close_window(self, t: EmbeddingTypeId) -> None:
        opened = self._window_open.pop(t)
        length = self.step - opened
        self.window["window_steps"] += length
        self.window["max_window_steps"] = max(self.window["max_window_steps"], length)

    def _request(self) -> tuple[UserRequest, EmbeddingTypeId]:
        sc = self.scenario
        user_id = sc.request_users[self.req_rng.below(len(sc.request_users))]
        publisher = sc.request_publishers[self.req_rng.below(len(sc.request_publishers))] if sc.request_publishers else ""
        type_id = self.types[self.req_rng.below(len(self.types))] if len(self.types) > 1 else self.types[0]
        req = self._request_cache.get((user_id, publisher))
        if req is None:
            user = self._users[user_id]
            req = UserRequest(user_id, user.attributes, user.geo, publisher, sc.request_k, user.consumed)
            self._request_cache[(user_id, publisher)] = req
        return req, type_id

    def _step_serving(self) -> tuple[str, Any]:
        clock = self.clocks["serving"]
        clock.remaining -= 1
        clock.next_due = self.t + clock.every
        req, type_id = self._request()
        in_use = self.eo.get_version_in_use(type_id)
        response, query = self.serving.resolve(req, type_id)
        outcome = self.engine.execute(query)
        self.counters["requests"] += 1

        self.checks["version_pass_through"] += 1
        if response is not None:
            self.counters["requests_with_user_vector"] += 1
            if query.user_version is not response.version or response.version != in_use:
                self._violate("version_pass_through", f"query version {query.user_version} vs EO {response.version}/{in_use}")
        elif query.user_version is not None:
            self._violate("version_pass_through", "query carries a version the EO never returned")

        self.checks["version_match"] += 1
        if outcome.version_block is not None and outcome.version_block != query.user_version:
            self._violate("version_match", f"scored against {outcome.version_block} for query {query.user_version}")
        if self.engine.cross_version_products:
            self._violate("version_match", f"{self.engine.cross_version_products} cross-version inner products")
            self.engine.cross_version_products = 0

        self.checks["generation_isolation"] += 1
        if outcome.generation_id != self.engine.live.generation_id:
            self._violate("generation_isolation", "query answered from a generation that is not live")

        self.checks["filter_soundness"] += 1
        window_open = type_id in self._window_open
        if window_open:
            self.window["requests_in_window"] += 1
        qv = query.user_version
        live_ids, allowed, holds_qv, embeddable = self._result_view(qv, req.user_geo, query.publisher_blocked_providers)
        attributable = 0
        n_embedding = 0
        results = outcome.results
        for item_id, _, mode, used in results:
            if item_id not in live_ids:
                self._violate("generation_isolation", f"result {item_id} not in generation {outcome.generation_id}")
                continue
            if item_id not in allowed:
                self._violate("filter_soundness", f"{item_id} violates a business rule")
            if mode == EMBEDDING:
                n_embedding += 1
                if used != qv or item_id not in holds_qv:
                    self._violate("version_match", f"{item_id} scored with {used} for {qv}")
            elif item_id in embeddable:
                attributable += 1
        n = len(results)
        self.counters["results_embedding"] += n_embedding
        self.counters["results_fallback"] += n - n_embedding
        if attributable:
            if window_open:
                self.window["fallback_in_window"] += attributable
            else:
                self.window["fallback_outside_window"] += attributable
        head = f"{req.user_id}|{req.publisher_id}|{type_id.key}|{qv.time_frame if qv else -1}|{attributable}|"
        body = "|".join([r.item_id for r in results]) + "|" + "".join([r.mode[0] for r in results])
        payload = (head + body).encode("utf-8") + struct.pack(f"<{n}d", *[r.score for r in results])
        # fallbacks the window can explain are visible in the trace itself
        return ("recommend" if not attributable else f"recommend:attributable={attributable}"), payload

    # -- invariants ----------------------------------------------------------

    def _result_view(
        self, qv: EmbeddingVersion | None, geo: str, blocked: frozenset[str]
    ) -> tuple[Mapping, frozenset[str], frozenset[str], frozenset[str]]:
        """Per-result facts for the live index, re-derived whenever the index or store moves.

        Returns the live ids, ids passing the business rules (evaluated here,
        independently of the engine), ids holding a vector at ``qv``, and ids
        the store could embed at ``qv``.
        """
        epoch = self.engine.epoch
        docs = self.engine.live.docs
        rkey = (epoch, geo, blocked)
        allowed = self._allowed.get(rkey)
        if allowed is None:
            if len(self._allowed) > 1024:
                self._allowed.clear()
            allowed = self._allowed[rkey] = frozenset(
                d.item_id for d in docs.values()
                if d.provider_id not in blocked and (not d.geo_targets or geo in d.geo_targets)
            )
        if qv is None:
            return docs, allowed, frozenset(), frozenset()
        table = self.store.table(qv)
        vkey = (epoch, qv)
        hit = self._versioned.get(vkey)
        if hit is None or hit[0] is not table:
            if len(self._versioned) > 1024:
                self._versioned.clear()
            holds = frozenset(i for i, d in docs.items() if qv in d.vectors)
            embeddable = frozenset(
                i for i in docs if i in self._items and self._embeddable(qv, i, self._items[i].attributes)
            )
            hit = self._versioned[vkey] = (table, holds, embeddable)
        return docs, allowed, hit[1], hit[2]

    def _embeddable(self, version: EmbeddingVersion, item_id: str, attributes: Mapping[str, float]) -> bool:
        """Whether the store can produce an item vector at ``version``."""
        table = self.store.table(version)
        if self.scenario.model_kind.direct_items:
            entity = self._entities.get(item_id)
            if entity is None:
                entity = self._entities[item_id] = EntityId.item(item_id)
            return entity in table
        for a in attributes:
            entity = self._entities.get(a)
            if entity is None:
                entity = self._entities[a] = EntityId.attribute(a)
            if entity in table:
                return True
        return False

    def _violate(self, name: str, detail: str) -> None:
        self.violations[name] += 1
        if self.first_violation is None:
            self.first_violation = {"invariant": name, "step": self.step, "t": self.t, "detail": detail}
            log.warning("invariant %s violated at step %d: %s", name, self.step, detail)

    def _check_states(self, actor: str, action: str) -> None:
        """Evaluated whenever the EO's version states changed during a step."""
        for t in self.types:
            prev_latest, prev_in_use = self._states[t]
            latest, in_use = self.eo.get_states(t)
            self._states[t] = (latest, in_use)
            self.checks["monotonicity"] += 1
            if prev_latest is not None and (latest is None or latest.time_frame < prev_latest.time_frame):
                self._violate("monotonicity", f"{t.key}: latest went from {prev_latest} to {latest}")
            if prev_in_use is not None and (in_use is None or in_use.time_frame < prev_in_use.time_frame):
                self._violate("monotonicity", f"{t.key}: in-use went from {prev_in_use} to {in_use}")
            if in_use is not None and (latest is None or in_use.time_frame > latest.time_frame):
                self._violate("monotonicity", f"{t.key}: in-use {in_use} ahead of latest {latest}")
            self.checks["trigger_exclusivity"] += 1
            if in_use != prev_in_use:
                self.counters["in_use_transitions"] += 1
                if actor != "indexer" or action != f"trigger:{t.key}":
                    self._violate("trigger_exclusivity", f"{t.key}: in-use changed by {actor}/{action}")
                if t in self._window_open:
                    self._close_window(t)

    def _check_two_version_safety(self) -> None:
        if self.engine.mode != "incremental":
            return
        key = (self.engine.epoch, tuple(self.eo.get_version_in_use(t) for t in self.types))
        if key == self._two_version_memo:
            return  # nothing observable changed since the last evaluation
        self._two_version_memo = key
        self.checks["two_version_safety"] += 1
        docs = self.engine.documents()
        for t, in_use in zip(self.types, key[1]):
            if in_use is None:
                continue
            for doc in docs:
                if in_use not in doc.vectors and self._embeddable(in_use, doc.item_id, doc.attributes):
                    self._violate("two_version_safety", f"{doc.item_id} lacks in-use {in_use.key}")

    # -- report --------------------------------------------------------------

    def _finish(self) -> dict:
        if self._finished:
            raise RuntimeError("simulation already finished")
        self._finished = True
        for t in list(self._window_open):
            self._close_window(t)
        final = {}
        gc_dropped = 0
        for t in self.types:
            latest, in_use = self.eo.get_states(t)
            final[t.key] = {
                "latest": latest.time_frame if latest else None,
                "in_use": in_use.time_frame if in_use else None,
            }
            if in_use is not None:
                gc_dropped += self.store.drop_versions_before(t, in_use.time_frame - 1)
        counters = dict(self.counters)
        counters["gc_records_dropped"] = gc_dropped
        counters["cache_hits"] = self.eo.cache_hits
        counters["cache_misses"] = self.eo.cache_misses
        report = {
            "scenario": self.scenario.name,
            "seed": self.seed,
            "index_mode": self.scenario.index_mode,
            "model_kind": self.scenario.model_kind.value,
            "steps": self.step,
            "opportunities": self.t,
            "counters": counters,
            "invariants": {
                name: {"checks": self.checks[name], "violations": self.violations[name]} for name in INVARIANTS
            },
            "mismatch_window": dict(self.window),
            "final_state": final,
            "index_cycles": self.cycle_reports,
            "first_violation": self.first_violation,
            "trace_digest": self._trace_hash.hexdigest(),
            "ok": not any(self.violations.values()),
        }
        return report


def report_bytes(report: Mapping[str, Any]) -> bytes:
    return (canonical_json(report) + "\n").encode("utf-8")


def run_scenario(scenario: Scenario, seed: int | None = None, *, record_trace: bool = True) -> tuple[dict, list[TraceEvent]]:
    sim = Simulation(scenario, seed, record_trace=record_trace)
    report = sim.run()
    return report, sim.trace


def write_trace(path: str | os.PathLike, scenario: Scenario, seed: int, events: Iterable[TraceEvent], report: Mapping) -> None:
    lines = [canonical_json({"trace_version": 1, "scenario": scenario.raw, "seed": seed})]
    lines.extend(canonical_json(e.to_json()) for e in events)
    lines.append(canonical_json({"report_sha256": hashlib.sha256(report_bytes(report)).hexdigest()}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def replay(path: str | os.PathLike) -> dict:
    """Re-execute a recorded trace; raises ReplayDivergence on any difference."""
    rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").split("\n") if line.strip()]
    if not rows or rows[0].get("trace_version") != 1:
        raise ReplayDivergence("not a trace file")
    header, body = rows[0], rows[1:]
    footer = body.pop() if body and "report_sha256" in body[-1] else None
    scenario = Scenario.from_dict(header["scenario"])
    for i, row in enumerate(body):
        if row.get("step") != i:
            raise ReplayDivergence(f"trace step ordinals are not consecutive at line {i + 2}")
    schedule = [(row["t"], row["actor"], row["action"], row["digest"]) for row in body]
    report = Simulation(scenario, header["seed"], schedule=schedule).run()
    if footer is not None and hashlib.sha256(report_bytes(report)).hexdigest() != footer["report_sha256"]:
        raise ReplayDivergence("replayed report differs from the recorded one")
    return report


def sweep(scenario: Scenario, seeds: Iterable[int]) -> dict:
    """Run one simulation per seed and aggregate the verdicts."""
    seeds = list(seeds)
    violations = {name: 0 for name in INVARIANTS}
    totals: dict[str, int] = {}
    window: dict[str, int] = {}
    failed = []
    training_cache: dict = {}
    for seed in seeds:
        report = Simulation(scenario, seed, record_trace=False, training_cache=training_cache).run()
        for name, verdict in report["invariants"].items():
            violations[name] += verdict["violations"]
        for key, value in report["counters"].items():
            totals[key] = totals.get(key, 0) + value
        for key, value in report["mismatch_window"].items():
            window[key] = max(window.get(key, 0), value) if key.startswith("max_") else window.get(key, 0) + value
        if not report["ok"]:
            failed.append({"seed": seed, "first_violation": report["first_violation"]})
    return {
        "scenario": scenario.name,
        "seeds": len(seeds),
        "seed_range": [seeds[0], seeds[-1]] if seeds else None,
        "passed": len(seeds) - len(failed),
        "failed": failed,
        "violations": violations,
        "totals": totals,
        "mismatch_window": window,
        "ok": not failed,
    }


# -- oracle equivalence ---------------------------------------------------------


def _random_vector(rng: SplitMix64, dim: int, quantized: bool) -> tuple[float, ...]:
    if quantized:
        return tuple((rng.below(5) - 2) * 0.5 for _ in range(dim))
    return tuple(rng.signed_unit() for _ in range(dim))


def random_instance(rng: SplitMix64, type_id: EmbeddingTypeId, max_docs: int = 200):
    """A random index + query mixing embedding and fallback scoring."""
    quantized = rng.below(3) == 0  # coarse values produce score ties
    regions = ["US", "FR", "DE", "JP"]
    providers = [f"p{j}" for j in range(6)]
    vocab = [f"a{j:02d}" for j in range(10)]
    versions = [EmbeddingVersion(type_id, 1), EmbeddingVersion(type_id, 2)]

    def weights(n: int) -> dict[str, float]:
        out = {}
        for _ in range(n):
            w = (1 + rng.below(4)) * 0.25 if quantized else rng.unit()
            out[vocab[rng.below(len(vocab))]] = w
        return out

    docs = []
    for i in range(rng.below(max_docs + 1)):
        geo = frozenset(regions[rng.below(4)] for _ in range(rng.below(3))) if rng.below(3) == 0 else frozenset()
        present = rng.below(4)  # bit 0 -> version 1, bit 1 -> version 2
        vectors = {v: _random_vector(rng, type_id.dimension, quantized) for b, v in enumerate(versions) if present >> b & 1}
        docs.append(IndexedDocument(f"d{rng.below(100000):05d}_{i}", providers[rng.below(6)], geo, weights(rng.below(4)), vectors))
    has_vector = rng.below(4) != 0
    version = versions[rng.below(2)] if has_vector else None
    query = RecommendationQuery(
        type_id=type_id,
        user_version=version,
        user_vector=_random_vector(rng, type_id.dimension, quantized) if has_vector else None,
        user_attributes=weights(rng.below(5)),
        user_geo=regions[rng.below(4)],
        publisher_blocked_providers=frozenset(providers[rng.below(6)] for _ in range(rng.below(3))),
        k=1 + rng.below(30) if rng.below(4) else 1 + rng.below(250),
    )
    fallback_weight = [1.0, 0.001, 0.5, 3.0][rng.below(4)]
    return docs, query, fallback_weight


def results_identical(a, b) -> bool:
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if (x.item_id, x.mode, x.version_used) != (y.item_id, y.mode, y.version_used):
            return False
        if x.score.hex() != y.score.hex():
            return False
    return True


def oracle_check(scenario: Scenario | None, n_instances: int, seed: int = 0, max_docs: int = 200) -> dict:
    """Compare the engine against the brute-force oracle on random instances."""
    type_id = scenario.types[0] if scenario is not None else EmbeddingTypeId("rand", "oracle", 8)
    rng = SplitMix64(seed)
    mismatches = []
    embedding_results = fallback_results = 0
    for n in range(n_instances):
        docs, query, fw = random_instance(rng, type_id, max_docs)
        engine = SearchEngine("shadow", fw)
        engine.swap_generation(engine.build_generation(docs))
        got = engine.execute_query(query)
        want = brute_force_oracle(query, docs, fw)
        embedding_results += sum(r.mode == EMBEDDING for r in want)
        fallback_results += sum(r.mode == FALLBACK for r in want)
        if not results_identical(got, want):
            mismatches.append(n)
    return {
        "instances": n_instances,
        "mismatches": len(mismatches),
        "mismatched_instances": mismatches[:20],
        "embedding_results": embedding_results,
        "fallback_results": fallback_results,
        "ok": not mismatches,
    }
