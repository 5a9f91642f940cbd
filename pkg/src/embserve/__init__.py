"""Search-engine serving of embeddings-based recommendations with version-synchronized indexing."""

from embserve.engine import SearchEngine, brute_force_oracle
from embserve.orchestrator import EmbeddingsOrchestrator
from embserve.store import (
    EmbeddingRecord,
    EmbeddingStore,
    EmbeddingTypeId,
    EmbeddingVersion,
    EntityId,
    EntityKind,
)

__all__ = [
    "EmbeddingRecord",
    "EmbeddingStore",
    "EmbeddingTypeId",
    "EmbeddingVersion",
    "EmbeddingsOrchestrator",
    "EntityId",
    "EntityKind",
    "SearchEngine",
    "brute_force_oracle",
]

__version__ = "0.1.0"
