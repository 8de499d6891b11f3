"""Dynamic inner-product range (DIPR) retrieval.

A token is *critical* for a query when its attention weight is at least
``alpha`` times the maximum weight; equivalently, when its raw inner product
is within ``beta = -sqrt(d) * ln(alpha)`` of the maximum inner product. A
DIPR query returns every critical token for a given slack ``beta``, so the
result size adapts to how peaked the score distribution is instead of being
pinned to a fixed k.

This module holds the exact brute-force evaluator (the oracle used for
ground truth everywhere), the attention-space/inner-product-space equivalence
check, and the graph-based approximate search with its window-cache
enhancement. Boundary comparisons are inclusive (``>=``) throughout.
"""

from __future__ import annotations

import math
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .core import inner_products, scaled_scores

if TYPE_CHECKING:
    from .index import GraphIndex


def alpha_to_beta(alpha: float, d: int) -> float:
    """Inner-product slack equivalent to attention-proportion threshold ``alpha``.

    ``beta = -sqrt(d) * ln(alpha)``; alpha must lie in (0, 1] (alpha -> 0
    would need unbounded slack).
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if d < 1:
        raise ValueError(f"dimension must be positive, got {d}")
    return -math.sqrt(d) * math.log(alpha)


def is_critical_by_attention(a_j: float, a_max: float, alpha: float) -> bool:
    """Attention-space criticality test: ``a_j >= alpha * a_max`` (inclusive)."""
    return a_j >= alpha * a_max


def dipr_bruteforce(
    q: np.ndarray,
    keys: np.ndarray,
    beta: float,
    token_ids: Iterable[int] | None = None,
) -> set[int]:
    """Exact DIPR: all token ids whose inner product is within ``beta`` of the max.

    ``keys`` is a nonempty (n, d) matrix; ``token_ids`` defaults to 0..n-1.
    The global-max token is always included.
    """
    keys = np.atleast_2d(keys)
    if keys.shape[0] == 0:
        raise ValueError("DIPR over an empty key set is undefined")
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    scores = inner_products(keys, q)
    mask = scores >= scores.max() - beta
    if token_ids is None:
        return set(np.flatnonzero(mask).tolist())
    ids = np.asarray(list(token_ids), dtype=np.int64)
    if ids.shape[0] != keys.shape[0]:
        raise ValueError("token_ids length must match key count")
    return set(ids[mask].tolist())


def theorem1_check(
    q: np.ndarray,
    keys: np.ndarray,
    alpha: float,
    boundary_tol: float = 1e-6,
) -> bool:
    """Verify attention-space and inner-product-space critical sets coincide.

    Computes the critical set twice: from actual softmax weights with
    threshold ``alpha``, and from raw inner products with
    ``beta = alpha_to_beta(alpha, d)``. Tokens within ``boundary_tol`` of
    either threshold are excluded before comparing, since the two routes
    round differently at an exact boundary.
    """
    keys = np.atleast_2d(keys)
    d = q.shape[-1]

    z = scaled_scores(keys, q)
    w = np.exp(z - z.max())
    a = w / w.sum()
    a_cut = alpha * a.max()
    by_attention = a >= a_cut

    s = inner_products(keys, q)
    s_cut = s.max() - alpha_to_beta(alpha, d)
    by_inner_product = s >= s_cut

    borderline = (np.abs(s - s_cut) <= boundary_tol) | (
        np.abs(a - a_cut) <= boundary_tol * max(a_cut, 1e-300)
    )
    keep = ~borderline
    return bool(np.array_equal(by_attention[keep], by_inner_product[keep]))


class CandidateList:
    """Append-only unordered candidate list with a capacity threshold.

    While the list holds at most ``l0`` entries, any offered token is
    appended; past that, a token is appended only when its score reaches the
    pruning bound ``best - beta`` (the bound may be raised externally via
    ``floor``, e.g. by the cached window's maximum). Nothing is ever removed,
    so cursor positions stay stable.
    """

    def __init__(self, l0: int, beta: float, floor: float = -np.inf):
        if l0 < 1:
            raise ValueError(f"capacity threshold must be >= 1, got {l0}")
        if beta < 0:
            raise ValueError(f"beta must be non-negative, got {beta}")
        self.l0 = l0
        self.beta = beta
        self.floor = floor
        self.ids: list[int] = []
        self.scores: list[float] = []
        self.best_score = -np.inf
        self.best_id = -1

    def __len__(self) -> int:
        return len(self.ids)

    def _push(self, token_id: int, score: float) -> None:
        self.ids.append(token_id)
        self.scores.append(score)
        # ties keep the smallest token id as the best entry
        if score > self.best_score or (score == self.best_score and token_id < self.best_id):
            self.best_score = score
            self.best_id = token_id

    @property
    def bound(self) -> float:
        """Current pruning bound: best-so-far raised to at least ``floor``."""
        return max(self.best_score, self.floor)

    def try_append(self, token_id: int, score: float) -> bool:
        """Append unless the list is past ``l0`` and the score is prunable."""
        if len(self.ids) <= self.l0 or score >= self.bound - self.beta:
            self._push(token_id, score)
            return True
        return False

    def seed(self, token_id: int, score: float) -> None:
        self._push(token_id, score)

    def result(self) -> set[int]:
        """Final cut: entries within ``beta`` of the best score (or the floor)."""
        cut = self.bound - self.beta
        return {t for t, s in zip(self.ids, self.scores) if s >= cut}


def _dedupe_keep_order(ids: np.ndarray) -> np.ndarray:
    """Drop repeated ids, keeping each id's first occurrence position."""
    _, first = np.unique(ids, return_index=True)
    first.sort()
    return ids[first]


def traverse(
    index: "GraphIndex",
    q: np.ndarray,
    start: int,
    l0: int,
    beta: float,
    window_max: float | None = None,
    admitted_limit: int | None = None,
    two_hop_threshold: float = 1.0,
    two_hop_cap: int = 256,
    always_two_hop: bool = False,
) -> CandidateList:
    """Candidate-list graph traversal shared by plain and prefix-filtered search.

    Walks the candidate list in insertion order; each cursor entry offers its
    unvisited neighbors to the list. Pending entries are expanded in batches
    (the neighbor gathering and scoring are vectorized), which is
    decision-for-decision identical to expanding one entry at a time because
    candidates keep entry-major, adjacency order and the scores they are
    judged by do not depend on the pruning bound.

    With ``admitted_limit`` set, only token ids below the limit may enter the
    list; an entry whose admitted 1-hop fraction falls below
    ``two_hop_threshold`` (or every entry, with ``always_two_hop``) also
    offers its neighbors' neighbors, taken from the index's precomputed
    2-hop table (``two_hop_cap`` ids per node), so the walk can cross
    non-admitted regions of the graph. Non-admitted nodes are never scored
    or marked visited, only traversed through.
    """
    n = index.n
    if n == 0:
        raise ValueError("search over an empty index")
    if not 0 <= start < n:
        raise ValueError(f"start node {start} out of range")
    keys64 = index.keys64
    q64 = q.astype(np.float64, copy=False)
    adjacency = index.adjacency

    floor = -np.inf if window_max is None else float(window_max)
    cands = CandidateList(l0, beta, floor=floor)
    cands.seed(start, float(keys64[start] @ q64))
    visited = np.zeros(n, dtype=bool)
    visited[start] = True

    cursor = 0
    while True:
        while cursor < len(cands):
            batch = cands.ids[cursor:]
            cursor = len(cands)

            pieces: list[np.ndarray] = []
            for u in batch:
                nbrs = adjacency[u]
                if admitted_limit is None:
                    pieces.append(nbrs)
                    continue
                admitted = nbrs < admitted_limit
                frac = float(admitted.mean()) if nbrs.size else 1.0
                if always_two_hop or frac < two_hop_threshold:
                    conduits = nbrs if two_hop_fanout is None else nbrs[:two_hop_fanout]
                    hops = [nbrs] + [adjacency[v] for v in conduits.tolist()]
                    expanded = np.concatenate(hops)
                    expanded = expanded[expanded < admitted_limit]
                    pieces.append(_dedupe_keep_order(expanded))
                else:
                    pieces.append(nbrs[admitted])
            if not pieces:
                continue
            offered = np.concatenate(pieces)
            if offered.size == 0:
                continue
            offered = _dedupe_keep_order(offered)
            fresh = offered[~visited[offered]]
            if fresh.size == 0:
                continue
            visited[fresh] = True
            scores = keys64[fresh] @ q64
            for token_id, score in zip(fresh.tolist(), scores.tolist()):
                cands.try_append(token_id, score)

        # Rescue for fragmented admitted regions: when the walk exhausts with
        # growth budget left (the admitted subgraph is islands more than two
        # hops apart), seed evenly spaced unvisited admitted ids and keep
        # walking. Never fires when the ordinary expansion fills the list.
        if admitted_limit is None or len(cands) > l0:
            break
        unvisited = np.flatnonzero(~visited[:admitted_limit])
        if unvisited.size == 0:
            break
        take = min(64, unvisited.size)
        picks = np.unique(np.round(np.linspace(0, unvisited.size - 1, take)).astype(np.int64))
        probes = unvisited[picks]
        visited[probes] = True
        scores = keys64[probes] @ q64
        for token_id, score in zip(probes.tolist(), scores.tolist()):
            cands.try_append(token_id, score)
    return cands


def diprs(
    index: "GraphIndex",
    q: np.ndarray,
    start: int,
    l0: int,
    beta: float,
    window_max: float | None = None,
) -> set[int]:
    """Approximate DIPR over a proximity graph.

    Seeds the candidate list with ``start``, then walks the list in insertion
    order, offering each entry's unvisited neighbors to the list. The first
    ``l0`` entries are accepted unconditionally so the search can range
    widely before the best-so-far bound starts pruning. When ``window_max``
    (the raw inner-product maximum over the caller's cached window) is given,
    it raises both the pruning bound and the final cut, so a strong window
    token tightens the search instead of loosening it.

    Returns the token ids that survive the final cut. Per-search state is
    confined to this call; the index is only read.
    """
    return traverse(index, q, start, l0, beta, window_max=window_max).result()
