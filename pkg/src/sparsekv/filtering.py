"""Prefix-filtered DIPR search for partial context reuse.

A stored context's graph can serve a request that reuses only a leading
prefix: each explored node offers its neighbors and, when too few of them
fall inside the prefix, its neighbors' neighbors as well, with non-admitted
candidates discarded before scoring. Non-admitted nodes act purely as
conduits, so the walk survives filters that would disconnect a naively
pruned graph. The returned ids always satisfy the predicate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dipr import traverse
from .index import GraphIndex


@dataclass(frozen=True)
class PrefixPredicate:
    """Admits token ids below ``prefix_len`` (the reused leading span)."""

    prefix_len: int

    def __post_init__(self) -> None:
        if self.prefix_len < 1:
            raise ValueError(f"prefix_len must be positive, got {self.prefix_len}")

    def admits(self, token_id: int) -> bool:
        return token_id < self.prefix_len


# ids scanned when the entry point itself is not admitted
_START_SCAN = 256


def remap_start(index: GraphIndex, pred: PrefixPredicate) -> int:
    """Admitted start node: the entry point itself when admitted, else the
    admitted node (scanned near the prefix boundary) closest to it."""
    entry = index.entry_point
    if pred.admits(entry):
        return entry
    lo = max(0, pred.prefix_len - _START_SCAN)
    scan = np.arange(lo, pred.prefix_len, dtype=np.int64)
    if scan.size == 0:
        return 0
    scores = index.keys64[scan] @ index.keys64[entry]
    return int(scan[np.argmax(scores)])


def filtered_diprs(
    index: GraphIndex,
    q: np.ndarray,
    pred: PrefixPredicate,
    l0: int,
    beta: float,
    two_hop_threshold: float = 1.0,
    two_hop_fanout: int | None = 20,
    always_two_hop: bool = False,
) -> set[int]:
    """DIPR search restricted to token ids admitted by ``pred``.

    Traversal follows the plain search except that neighbor expansion
    gathers 2-hop neighbors whenever the admitted fraction of an entry's
    direct neighbors falls below ``two_hop_threshold`` (``always_two_hop``
    forces the wider expansion everywhere, matching the unconditional
    variant; ``two_hop_fanout`` bounds the expansion cost). Candidates
    failing the predicate are dropped before any scoring or visited
    bookkeeping. The best entry and the final cut are computed over admitted
    tokens only.
    """
    if pred.prefix_len > index.n:
        raise ValueError(
            f"prefix_len {pred.prefix_len} exceeds context length {index.n}"
        )
    start = remap_start(index, pred)
    cands = traverse(
        index,
        q,
        start,
        l0,
        beta,
        admitted_limit=pred.prefix_len,
        two_hop_threshold=two_hop_threshold,
        two_hop_fanout=two_hop_fanout,
        always_two_hop=always_two_hop,
    )
    return cands.result()
