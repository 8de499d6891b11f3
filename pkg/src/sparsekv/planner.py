"""Rule-based planner choosing (query type, index type) per request.

The decision tree, in order: short contexts get exact full attention with no
index; partial prefix reuse forces the prefix-filtered DIPR query (the only
retrieval that can honor the predicate against a stored index); when the
memory budget covers keeping the context's blocks resident, top-k over the
coarse block index wins on latency; otherwise DIPR runs on the flat index
for designated early layers (they need too many tokens for graph traversal
to pay off) and on the fine-grained graph everywhere else.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .core import ModelShape


class QueryKind(enum.Enum):
    FULL_ATTENTION = "full_attention"
    TOP_K = "top_k"
    DIPR = "dipr"
    FILTERED_DIPR = "filtered_dipr"


class IndexKind(enum.Enum):
    NONE = "none"
    COARSE = "coarse"
    FINE = "fine"
    FLAT = "flat"


# legal (index -> query kinds) pairs; full attention pairs with no index
_LEGAL: dict[IndexKind, frozenset[QueryKind]] = {
    IndexKind.NONE: frozenset({QueryKind.FULL_ATTENTION}),
    IndexKind.COARSE: frozenset({QueryKind.TOP_K, QueryKind.FILTERED_DIPR}),
    IndexKind.FINE: frozenset(
        {QueryKind.TOP_K, QueryKind.FILTERED_DIPR, QueryKind.DIPR}
    ),
    IndexKind.FLAT: frozenset(
        {QueryKind.TOP_K, QueryKind.FILTERED_DIPR, QueryKind.DIPR}
    ),
}


@dataclass(frozen=True)
class PlannerConfig:
    """Planner thresholds and default query parameters."""

    short_context_threshold: int = 1024
    resident_fraction: float = 1.0
    first_layers: tuple[int, ...] = (0,)
    top_k: int = 100
    beta: float = 110.0


@dataclass(frozen=True)
class PlanRequest:
    context_len: int
    layer: int
    shape: ModelShape
    memory_budget_bytes: int = 0
    reused_prefix_len: int | None = None

    def __post_init__(self) -> None:
        if self.context_len < 0:
            raise ValueError("context_len must be non-negative")
        if self.memory_budget_bytes < 0:
            raise ValueError("memory_budget_bytes must be non-negative")
        if self.reused_prefix_len is not None:
            if not 0 < self.reused_prefix_len < self.context_len:
                raise ValueError(
                    "reused_prefix_len must be positive and smaller than context_len"
                )


@dataclass(frozen=True)
class Plan:
    query: QueryKind
    index: IndexKind
    k: int | None = None
    beta: float | None = None
    prefix_len: int | None = None

    def __post_init__(self) -> None:
        if self.query not in _LEGAL[self.index]:
            raise ValueError(f"illegal plan: {self.query.value} on {self.index.value}")

    def is_legal(self) -> bool:
        return self.query in _LEGAL[self.index]


def coarse_residency_bytes(context_len: int, dim: int, resident_fraction: float) -> int:
    """Bytes to keep a context's K and V resident at the given fraction."""
    return int(context_len * 2 * dim * 4 * resident_fraction)


def plan(req: PlanRequest, cfg: PlannerConfig = PlannerConfig()) -> Plan:
    """Pick the (query, index) pair for one request. Deterministic."""
    if req.context_len <= cfg.short_context_threshold:
        return Plan(QueryKind.FULL_ATTENTION, IndexKind.NONE)

    layer_is_flat = req.layer in cfg.first_layers

    if req.reused_prefix_len is not None:
        return Plan(
            QueryKind.FILTERED_DIPR,
            IndexKind.FLAT if layer_is_flat else IndexKind.FINE,
            beta=cfg.beta,
            prefix_len=req.reused_prefix_len,
        )

    needed = coarse_residency_bytes(req.context_len, req.shape.dim, cfg.resident_fraction)
    if req.memory_budget_bytes >= needed:
        return Plan(QueryKind.TOP_K, IndexKind.COARSE, k=cfg.top_k)

    if layer_is_flat:
        return Plan(QueryKind.DIPR, IndexKind.FLAT, beta=cfg.beta)
    return Plan(QueryKind.DIPR, IndexKind.FINE, beta=cfg.beta)
