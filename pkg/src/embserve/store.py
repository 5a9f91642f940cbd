"""Versioned embedding key-value store.

One record per vector, keyed by ``(version, entity)``. The store is the only
persistence boundary between the offline trainer and the orchestrator.

Writes are copy-on-write at the granularity of a version table: a batch
builds fresh tables off to the side and publishes them with a single
reference assignment, so readers never take a lock and never observe half
of a batch.
"""

from __future__ import annotations

import json
import math
import os
import threading
from types import MappingProxyType
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from embserve.errors import (
    DimensionMismatch,
    InvalidIdentifier,
    MalformedLine,
    NonFiniteComponent,
)

Vector = tuple[float, ...]

_SNAPSHOT_KEYS = ("algo", "config", "tf", "kind", "id", "vec")


def _check_identifier(value: str, what: str, *, allow_empty: bool = False) -> None:
    if not isinstance(value, str):
        raise InvalidIdentifier(f"{what} must be a string, got {type(value).__name__}")
    if not value and not allow_empty:
        raise InvalidIdentifier(f"{what} must be non-empty")
    if "|" in value:
        raise InvalidIdentifier(f"{what} may not contain '|': {value!r}")


class EntityKind(str, Enum):
    USER = "user"
    ITEM = "item"
    ATTRIBUTE = "attribute"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, slots=True)
class EmbeddingTypeId:
    """An algorithm plus one hyperparameter configuration; fixes the vector space."""

    algorithm_name: str
    config_tag: str
    dimension: int
    _hash: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        _check_identifier(self.algorithm_name, "algorithm_name")
        _check_identifier(self.config_tag, "config_tag")
        if not isinstance(self.dimension, int) or self.dimension < 1:
            raise DimensionMismatch(f"dimension must be a positive integer, got {self.dimension!r}")
        object.__setattr__(self, "_hash", hash((self.algorithm_name, self.config_tag, self.dimension)))

    def __hash__(self) -> int:
        return self._hash

    @property
    def name(self) -> tuple[str, str]:
        return (self.algorithm_name, self.config_tag)

    @property
    def key(self) -> str:
        return f"{self.algorithm_name}|{self.config_tag}"

    def version(self, time_frame: int) -> EmbeddingVersion:
        return EmbeddingVersion(self, time_frame)


@dataclass(frozen=True, slots=True)
class EmbeddingVersion:
    type_id: EmbeddingTypeId
    time_frame: int
    _hash: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.time_frame, int) or self.time_frame < 0:
            raise ValueError(f"time_frame must be a non-negative integer, got {self.time_frame!r}")
        object.__setattr__(self, "_hash", hash((self.type_id, self.time_frame)))

    def __hash__(self) -> int:
        return self._hash

    @property
    def key(self) -> str:
        """``algo|config|tf``; the label used in index dumps."""
        return f"{self.type_id.algorithm_name}|{self.type_id.config_tag}|{self.time_frame}"

    def __lt__(self, other: EmbeddingVersion) -> bool:  # type ids are not ordered
        return (self.type_id.name, self.time_frame) < (other.type_id.name, other.time_frame)


@dataclass(frozen=True, slots=True, order=True)
class EntityId:
    kind: EntityKind
    id: str
    _hash: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.kind, EntityKind):
            try:
                object.__setattr__(self, "kind", EntityKind(self.kind))
            except ValueError:
                raise InvalidIdentifier(f"unknown entity kind {self.kind!r}") from None
        _check_identifier(self.id, "entity id")
        object.__setattr__(self, "_hash", hash((self.kind.value, self.id)))

    def __hash__(self) -> int:
        return self._hash

    @classmethod
    def user(cls, id: str) -> EntityId:
        return cls(EntityKind.USER, id)

    @classmethod
    def item(cls, id: str) -> EntityId:
        return cls(EntityKind.ITEM, id)

    @classmethod
    def attribute(cls, id: str) -> EntityId:
        return cls(EntityKind.ATTRIBUTE, id)

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.id}"


def canonical_key(version: EmbeddingVersion, entity: EntityId) -> str:
    """Flat ``algorithm|config|time_frame|kind|id`` encoding of a record key."""
    t = version.type_id
    return f"{t.algorithm_name}|{t.config_tag}|{version.time_frame}|{entity.kind.value}|{entity.id}"


def as_vector(values: Iterable[float], dimension: int) -> Vector:
    """Coerce to a tuple of floats, enforcing length and finiteness."""
    vec = tuple(float(x) for x in values)
    if len(vec) != dimension:
        raise DimensionMismatch(f"vector has {len(vec)} components, type declares {dimension}")
    for x in vec:
        if not math.isfinite(x):
            raise NonFiniteComponent(f"non-finite component {x!r}")
    return vec


@dataclass(frozen=True, slots=True)
class EmbeddingRecord:
    version: EmbeddingVersion
    entity: EntityId
    vector: Vector

    def __post_init__(self) -> None:
        object.__setattr__(self, "vector", as_vector(self.vector, self.version.type_id.dimension))

    @property
    def key(self) -> str:
        return canonical_key(self.version, self.entity)


_EMPTY_TABLE: Mapping[EntityId, Vector] = MappingProxyType({})


class EmbeddingStore:
    """In-process stand-in for the distributed key-value store.

    Safe for any number of concurrent readers and one writer per batch.
    """

    def __init__(self, records: Iterable[EmbeddingRecord] = ()) -> None:
        self._tables: dict[EmbeddingVersion, dict[EntityId, Vector]] = {}
        self._dims: dict[tuple[str, str], int] = {}
        self._write_lock = threading.Lock()
        records = list(records)
        if records:
            self.put_batch(records)

    def __len__(self) -> int:
        return sum(len(t) for t in self._tables.values())

    def put_batch(self, records: Sequence[EmbeddingRecord]) -> int:
        """Write all records atomically; later records win on duplicate keys."""
        if not records:
            return 0
        with self._write_lock:
            dims = dict(self._dims)
            for rec in records:
                t = rec.version.type_id
                declared = dims.setdefault(t.name, t.dimension)
                if declared != t.dimension:
                    raise DimensionMismatch(
                        f"type {t.key} already has dimension {declared}, record declares {t.dimension}"
                    )
                if len(rec.vector) != declared:
                    raise DimensionMismatch(
                        f"{rec.key}: vector has {len(rec.vector)} components, type declares {declared}"
                    )
            tables = dict(self._tables)
            copied: set[EmbeddingVersion] = set()
            for rec in records:
                if rec.version not in copied:
                    tables[rec.version] = dict(tables.get(rec.version, ()))
                    copied.add(rec.version)
                tables[rec.version][rec.entity] = rec.vector
            self._dims = dims
            self._tables = tables
        return len(records)

    def get(self, version: EmbeddingVersion, entity: EntityId) -> Vector | None:
        table = self._tables.get(version)
        if table is None:
            return None
        return table.get(entity)

    def has_version(self, version: EmbeddingVersion) -> bool:
        return bool(self._tables.get(version))

    def time_frames(self, type_id: EmbeddingTypeId) -> list[int]:
        return sorted(v.time_frame for v, t in self._tables.items() if v.type_id == type_id and t)

    def max_time_frame(self, type_id: EmbeddingTypeId) -> int | None:
        frames = self.time_frames(type_id)
        return frames[-1] if frames else None

    def entities(self, version: EmbeddingVersion) -> frozenset[EntityId]:
        return frozenset(self._tables.get(version, ()))

    def table(self, version: EmbeddingVersion) -> Mapping[EntityId, Vector]:
        """Read-only view of one version (a published table is never mutated)."""
        return self._tables.get(version, _EMPTY_TABLE)

    def records(self) -> Iterator[EmbeddingRecord]:
        """All records in canonical key order."""
        keyed = []
        for version, table in self._tables.items():
            for entity, vec in table.items():
                keyed.append((canonical_key(version, entity), version, entity, vec))
        keyed.sort(key=lambda row: row[0])
        for _, version, entity, vec in keyed:
            yield EmbeddingRecord(version, entity, vec)

    def drop_versions_before(self, type_id: EmbeddingTypeId, time_frame: int) -> int:
        """Remove every version of ``type_id`` older than ``time_frame``; returns records dropped."""
        with self._write_lock:
            doomed = [v for v in self._tables if v.type_id == type_id and v.time_frame < time_frame]
            if not doomed:
                return 0
            tables = dict(self._tables)
            dropped = 0
            for v in doomed:
                dropped += len(tables.pop(v))
            self._tables = tables
        return dropped

    # -- snapshots -----------------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for rec in self.records():
            t = rec.version.type_id
            row = {
                "algo": t.algorithm_name,
                "config": t.config_tag,
                "tf": rec.version.time_frame,
                "kind": rec.entity.kind.value,
                "id": rec.entity.id,
                "vec": list(rec.vector),
            }
            lines.append(json.dumps(row, ensure_ascii=False, separators=(",", ":")))
        return "".join(line + "\n" for line in lines)

    def save_snapshot(self, path: str | os.PathLike) -> int:
        text = self.dumps()
        Path(path).write_text(text, encoding="utf-8")
        return text.count("\n")

    def load_snapshot(self, path: str | os.PathLike) -> int:
        text = Path(path).read_text(encoding="utf-8")
        return self.put_batch(parse_snapshot(text, self._dims))


def parse_snapshot(text: str, known_dims: Mapping[tuple[str, str], int] | None = None) -> list[EmbeddingRecord]:
    """Parse snapshot text into records, validating every line.

    The dimension of a type is taken from ``known_dims`` or else from the
    first line that mentions it.
    """
    dims = dict(known_dims or {})
    records: list[EmbeddingRecord] = []
    # records are separated by "\n" only; identifiers may contain other line breaks
    for line_no, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLine(line_no, f"invalid JSON ({exc.msg})") from None
        if not isinstance(row, dict) or set(row) != set(_SNAPSHOT_KEYS):
            raise MalformedLine(line_no, f"expected exactly the keys {', '.join(_SNAPSHOT_KEYS)}")
        vec = row["vec"]
        tf = row["tf"]
        if not isinstance(vec, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in vec):
            raise MalformedLine(line_no, "vec must be a list of numbers")
        if not isinstance(tf, int) or isinstance(tf, bool) or tf < 0:
            raise MalformedLine(line_no, "tf must be a non-negative integer")
        name = (row["algo"], row["config"])
        dim = dims.setdefault(name, len(vec))
        if len(vec) != dim:
            err = DimensionMismatch(f"line {line_no}: vector has {len(vec)} components, type declares {dim}")
            err.line_no = line_no
            raise err
        try:
            type_id = EmbeddingTypeId(row["algo"], row["config"], dim)
            rec = EmbeddingRecord(EmbeddingVersion(type_id, tf), EntityId(row["kind"], row["id"]), vec)
        except NonFiniteComponent as exc:
            raise MalformedLine(line_no, str(exc)) from None
        except (InvalidIdentifier, ValueError) as exc:
            raise MalformedLine(line_no, str(exc)) from None
        records.append(rec)
    return records
