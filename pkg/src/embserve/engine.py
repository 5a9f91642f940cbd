"""Search core: filtered, version-scoped maximum inner product top-k.

Documents carry categorical filter fields (provider, geo targets), weighted
semantic attributes, and vectors keyed by :class:`EmbeddingVersion`. A query
names one version; a document is scored by inner product only if it holds a
vector under exactly that version, otherwise by the attribute-overlap
fallback. Both kinds of score are ranked in one pool.

Two liveness modes are supported. In ``shadow`` mode the engine serves an
immutable :class:`IndexGeneration` and new generations are swapped in
atomically. In ``incremental`` mode documents are upserted/deleted in place.
"""

from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Literal, Mapping, NamedTuple, Sequence

import numpy as np

from embserve.errors import (
    DimensionMismatch,
    DuplicateItemId,
    SealedGeneration,
    UnknownItem,
    WrongIndexMode,
)
from embserve.store import EmbeddingTypeId, EmbeddingVersion, Vector, as_vector

IndexMode = Literal["shadow", "incremental"]
EMBEDDING = "embedding"
FALLBACK = "fallback"

_generation_ids = itertools.count(1)


def _clean_weights(attrs: Mapping[str, float]) -> dict[str, float]:
    # +0.0 folds -0.0 into 0.0 so min() cannot depend on argument order
    return {str(a): float(w) + 0.0 for a, w in attrs.items()}


@dataclass(frozen=True)
class IndexedDocument:
    item_id: str
    provider_id: str
    geo_targets: frozenset[str] = frozenset()
    attributes: Mapping[str, float] = field(default_factory=dict)
    vectors: Mapping[EmbeddingVersion, Vector] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "geo_targets", frozenset(self.geo_targets))
        object.__setattr__(self, "attributes", _clean_weights(self.attributes))
        object.__setattr__(
            self,
            "vectors",
            {v: as_vector(vec, v.type_id.dimension) for v, vec in self.vectors.items()},
        )

    def versions_of(self, type_id: EmbeddingTypeId) -> list[EmbeddingVersion]:
        return sorted(v for v in self.vectors if v.type_id == type_id)

    def to_json(self) -> dict:
        return {
            "item": self.item_id,
            "provider": self.provider_id,
            "geo": sorted(self.geo_targets),
            "attrs": dict(sorted(self.attributes.items())),
            "vectors": {v.key: list(vec) for v, vec in sorted(self.vectors.items())},
        }


@dataclass(frozen=True)
class RecommendationQuery:
    type_id: EmbeddingTypeId
    user_version: EmbeddingVersion | None = None
    user_vector: Vector | None = None
    user_attributes: Mapping[str, float] = field(default_factory=dict)
    user_geo: str = ""
    publisher_blocked_providers: frozenset[str] = frozenset()
    k: int = 10

    def __post_init__(self) -> None:
        if (self.user_version is None) != (self.user_vector is None):
            raise ValueError("user_version and user_vector must be given together")
        if not isinstance(self.k, int) or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")
        if self.user_vector is not None:
            object.__setattr__(self, "user_vector", tuple(float(x) for x in self.user_vector))
        object.__setattr__(self, "user_attributes", _clean_weights(self.user_attributes))
        object.__setattr__(self, "publisher_blocked_providers", frozenset(self.publisher_blocked_providers))

    def validate(self) -> None:
        if self.user_version is None:
            return
        if self.user_version.type_id != self.type_id:
            raise DimensionMismatch(f"query version {self.user_version.key} is not of type {self.type_id.key}")
        if len(self.user_vector) != self.type_id.dimension:
            raise DimensionMismatch(
                f"user vector has {len(self.user_vector)} components, {self.type_id.key} has {self.type_id.dimension}"
            )


class ScoredResult(NamedTuple):
    item_id: str
    score: float
    mode: str
    version_used: EmbeddingVersion | None = None

    def to_json(self) -> dict:
        return {
            "item": self.item_id,
            "score": self.score,
            "mode": self.mode,
            "tf": self.version_used.time_frame if self.version_used is not None else None,
        }


def passes_filters(doc: IndexedDocument, q: RecommendationQuery) -> bool:
    if doc.provider_id in q.publisher_blocked_providers:
        return False
    return not doc.geo_targets or q.user_geo in doc.geo_targets


class _Columns:
    """Column-oriented view of a fixed document set, rows in item_id order."""

    def __init__(self, docs: Mapping[str, IndexedDocument]) -> None:
        ids = sorted(docs)
        n = len(ids)
        self.ids = ids
        self.n = n
        ordered = [docs[i] for i in ids]

        providers: dict[str, list[int]] = {}
        regions: dict[str, list[int]] = {}
        attrs: dict[str, tuple[list[int], list[float]]] = {}
        vec_rows: dict[EmbeddingVersion, list[tuple[int, Vector]]] = {}
        untargeted = np.zeros(n, dtype=bool)
        for row, doc in enumerate(ordered):
            providers.setdefault(doc.provider_id, []).append(row)
            if doc.geo_targets:
                for r in doc.geo_targets:
                    regions.setdefault(r, []).append(row)
            else:
                untargeted[row] = True
            for a, w in doc.attributes.items():
                rows, ws = attrs.setdefault(a, ([], []))
                rows.append(row)
                ws.append(w)
            for v, vec in doc.vectors.items():
                vec_rows.setdefault(v, []).append((row, vec))

        # postings as bitmaps
        self.untargeted = untargeted
        self.provider_masks = {p: self._mask(rows) for p, rows in providers.items()}
        self.geo_masks = {}
        for r, rows in regions.items():
            m = untargeted.copy()
            m[rows] = True
            self.geo_masks[r] = m
        self.attr_postings = {
            a: (np.asarray(rows, dtype=np.intp), np.asarray(ws, dtype=np.float64)) for a, (rows, ws) in attrs.items()
        }
        # per version: presence mask and an (n, d) matrix, zero rows where absent
        self.vectors: dict[EmbeddingVersion, tuple[np.ndarray, np.ndarray]] = {}
        for v, entries in vec_rows.items():
            has = np.zeros(n, dtype=bool)
            mat = np.zeros((n, v.type_id.dimension), dtype=np.float64)
            for row, vec in entries:
                has[row] = True
                mat[row] = vec
            self.vectors[v] = (has, mat)
        # memo of filter results; valid for the lifetime of this immutable view
        self._eligible: dict[tuple[str, frozenset[str]], np.ndarray] = {}
        self._blocks: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self._fallbacks: dict[tuple, np.ndarray] = {}
        self._no_vectors = np.zeros(n, dtype=bool)

    def _mask(self, rows: list[int]) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[rows] = True
        return m

    def eligible(self, geo: str, blocked: frozenset[str]) -> np.ndarray:
        """Row numbers passing geo targeting and the provider blocklist."""
        key = (geo, blocked)
        rows = self._eligible.get(key)
        if rows is None:
            mask = self.geo_masks.get(geo, self.untargeted)
            for p in blocked:
                pm = self.provider_masks.get(p)
                if pm is not None:
                    mask = mask & ~pm
            rows = np.flatnonzero(mask)
            if len(self._eligible) < 4096:
                self._eligible[key] = rows
        return rows

    def _block(
        self, version: EmbeddingVersion | None, geo: str, blocked: frozenset[str], candidates: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray] | None:
        """Presence mask and transposed (d, n) vectors of ``version`` for the candidates."""
        if version is None or version not in self.vectors:
            return None
        key = (version, geo, blocked)
        sub = self._blocks.get(key)
        if sub is None:
            has, mat = self.vectors[version]
            sub = (has[candidates], np.ascontiguousarray(mat[candidates].T))
            if len(self._blocks) < 4096:
                self._blocks[key] = sub
        return sub

    def _fallback(self, q: RecommendationQuery, fallback_weight: float) -> np.ndarray:
        """Attribute-overlap scores of every row, summed in ascending attribute order."""
        attrs = q.user_attributes
        key = (tuple(sorted(attrs.items())), fallback_weight)
        fb = self._fallbacks.get(key)
        if fb is None:
            full = np.zeros(self.n)
            for a, w in key[0]:
                posting = self.attr_postings.get(a)
                if posting is not None:
                    rows, ws = posting
                    full[rows] += np.minimum(w, ws)
            fb = full * fallback_weight
            if len(self._fallbacks) < 4096:
                self._fallbacks[key] = fb
        return fb

    def query(
        self, q: RecommendationQuery, fallback_weight: float
    ) -> tuple[list[int], list[float], list[bool], EmbeddingVersion | None]:
        """Return ranked rows with their scores, embedding-mode flags and the version block used."""
        if self.n == 0:
            return [], [], [], None
        candidates = self.eligible(q.user_geo, q.publisher_blocked_providers)
        if candidates.size == 0:
            return [], [], [], None

        fb = self._fallback(q, fallback_weight)[candidates]

        used = None
        block = self._block(q.user_version, q.user_geo, q.publisher_blocked_providers, candidates)
        if block is not None:
            has, mat_t = block
            used = q.user_version
            # accumulate adds one component at a time, left to right, like the
            # naive loop; add.reduce may switch to pairwise summation when the
            # reduced axis is contiguous (a single candidate, for instance)
            emb = np.add.accumulate(mat_t * np.asarray(q.user_vector)[:, None], axis=0)[-1] + 0.0
            scores = np.where(has, emb, fb)
        else:
            has = self._no_vectors[: candidates.size]
            scores = fb
        top = np.argsort(-scores, kind="stable")[: q.k]
        return candidates[top].tolist(), scores[top].tolist(), has[top].tolist(), used


class IndexGeneration:
    """One build of the index. Sealed generations reject every mutation."""

    def __init__(self, docs: Iterable[IndexedDocument] = (), *, sealed: bool = True) -> None:
        self._docs: dict[str, IndexedDocument] = {}
        for doc in docs:
            if doc.item_id in self._docs:
                raise DuplicateItemId(doc.item_id)
            self._docs[doc.item_id] = doc
        self.sealed = sealed
        self.generation_id = next(_generation_ids)
        self._columns: _Columns | None = None

    def __len__(self) -> int:
        return len(self._docs)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._docs

    def get(self, item_id: str) -> IndexedDocument | None:
        return self._docs.get(item_id)

    @property
    def docs(self) -> Mapping[str, IndexedDocument]:
        """Read-only view of the documents, keyed by item id."""
        return MappingProxyType(self._docs)

    def documents(self) -> list[IndexedDocument]:
        return [self._docs[i] for i in sorted(self._docs)]

    @property
    def columns(self) -> _Columns:
        if self._columns is None:
            self._columns = _Columns(self._docs)
        return self._columns

    def _mutable(self) -> None:
        if self.sealed:
            raise SealedGeneration(f"generation {self.generation_id} is sealed")

    def put(self, doc: IndexedDocument) -> None:
        self._mutable()
        self._docs[doc.item_id] = doc
        self._columns = None

    def remove(self, item_id: str) -> IndexedDocument:
        self._mutable()
        try:
            doc = self._docs.pop(item_id)
        except KeyError:
            raise UnknownItem(item_id) from None
        self._columns = None
        return doc

    def copy(self, *, sealed: bool) -> IndexGeneration:
        return IndexGeneration(self._docs.values(), sealed=sealed)


@dataclass(frozen=True)
class QueryOutcome:
    generation_id: int
    results: list[ScoredResult]
    version_block: EmbeddingVersion | None


class SearchEngine:
    def __init__(self, mode: IndexMode = "shadow", fallback_weight: float = 1.0) -> None:
        if mode not in ("shadow", "incremental"):
            raise ValueError(f"unknown index mode {mode!r}")
        self.mode = mode
        self.fallback_weight = float(fallback_weight)
        self._live = IndexGeneration(sealed=True) if mode == "shadow" else IndexGeneration(sealed=False)
        self._lock = threading.Lock()
        self.epoch = 0  # bumped on every visible index change
        # inner products computed per (query version, document version) pair
        self.inner_products: dict[tuple[str, str], int] = {}
        self.cross_version_products = 0

    @staticmethod
    def build_generation(docs: Sequence[IndexedDocument]) -> IndexGeneration:
        gen = IndexGeneration(docs, sealed=True)
        gen.columns  # materialize postings eagerly; the generation is read-only from here on
        return gen

    @property
    def live(self) -> IndexGeneration:
        return self._live

    def swap_generation(self, new_generation: IndexGeneration) -> IndexGeneration:
        if self.mode != "shadow":
            raise WrongIndexMode("generation swap requires shadow mode")
        if not new_generation.sealed:
            raise SealedGeneration("only sealed generations can be swapped in")
        with self._lock:
            previous, self._live = self._live, new_generation
            self.epoch += 1
        return previous

    def upsert_document(self, doc: IndexedDocument) -> None:
        """Delete-then-index as one step with respect to concurrent queries."""
        if self.mode != "incremental":
            raise WrongIndexMode("upserts require incremental mode")
        with self._lock:
            self._live.put(doc)
            self.epoch += 1

    def delete_document(self, item_id: str) -> None:
        if self.mode != "incremental":
            raise WrongIndexMode("deletes require incremental mode")
        with self._lock:
            self._live.remove(item_id)
            self.epoch += 1

    def execute(self, q: RecommendationQuery) -> QueryOutcome:
        q.validate()
        with self._lock:
            gen = self._live
            cols = gen.columns  # built under the lock so an upsert cannot tear it
        rows, scores, flags, used = cols.query(q, self.fallback_weight)
        ids = cols.ids
        results = [
            ScoredResult(ids[row], score, EMBEDDING, used) if flag else ScoredResult(ids[row], score, FALLBACK, None)
            for row, score, flag in zip(rows, scores, flags)
        ]
        if used is not None:
            key = (q.user_version, used)
            n = sum(flags)
            self.inner_products[key] = self.inner_products.get(key, 0) + n
            if used != q.user_version:
                self.cross_version_products += n
        return QueryOutcome(gen.generation_id, results, used)

    def execute_query(self, q: RecommendationQuery) -> list[ScoredResult]:
        return self.execute(q).results

    def documents(self) -> list[IndexedDocument]:
        with self._lock:
            return self._live.documents()

    def dump(self) -> str:
        """Index dump: one JSON document per line, sorted by item_id."""
        return "".join(
            json.dumps(d.to_json(), sort_keys=True, separators=(",", ":")) + "\n" for d in self.documents()
        )


def brute_force_oracle(
    q: RecommendationQuery, docs: Iterable[IndexedDocument], fallback_weight: float = 1.0
) -> list[ScoredResult]:
    """Linear-scan reference for :meth:`SearchEngine.execute_query`."""
    q.validate()
    scored = []
    for doc in docs:
        if not passes_filters(doc, q):
            continue
        vec = doc.vectors.get(q.user_version) if q.user_version is not None else None
        if vec is not None:
            s = 0.0
            for j in range(len(vec)):
                s += q.user_vector[j] * vec[j]
            scored.append((-s, doc.item_id, s, EMBEDDING, q.user_version))
        else:
            s = 0.0
            for a in sorted(set(q.user_attributes) & set(doc.attributes)):
                s += min(q.user_attributes[a], doc.attributes[a])
            s = fallback_weight * s
            scored.append((-s, doc.item_id, s, FALLBACK, None))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [ScoredResult(item, s, mode, v) for _, item, s, mode, v in scored[: q.k]]
