"""The three index families over key vectors: flat (exhaustive scan),
fine-grained proximity graph, and coarse block index, plus shared-graph
construction for grouped-query heads.

Graph construction has two stages. When sampled query vectors are available,
stage one computes each query's exact nearest keys by inner product (chunked,
optionally multi-worker) and projects the co-retrieved keys into key-key
edges; stage two runs a graph search from every key to add approximate
nearest-neighbor edges, which repairs the connectivity the projection alone
misses. Without queries, a standard incremental proximity-graph build over
the keys alone is used. Either way the result is reachable from its entry
point (verified, repaired if needed) and immutable afterwards.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .core import inner_products
from .dipr import dipr_bruteforce

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - declared dependency
    threadpool_limits = None


@dataclass(frozen=True)
class GraphParams:
    """Construction knobs for the proximity graph."""

    max_degree: int = 32
    knn_k: int = 32
    enhance_ef: int = 64
    enhance_k: int = 8
    workers: int = 1


@dataclass
class FlatIndex:
    """Dense key array scanned exhaustively; token ids are 0..n-1."""

    keys: np.ndarray

    def __post_init__(self) -> None:
        self.keys = np.atleast_2d(self.keys)
        self._keys64 = self.keys.astype(np.float64)

    @property
    def n(self) -> int:
        return self.keys.shape[0]

    @property
    def keys64(self) -> np.ndarray:
        return self._keys64

    def top_k(self, q: np.ndarray, k: int) -> list[int]:
        """Exact top-k token ids by inner product, descending, ties by smaller id."""
        if not 1 <= k <= self.n:
            raise ValueError(f"k must be in [1, {self.n}], got {k}")
        scores = inner_products(self._keys64, q)
        order = np.lexsort((np.arange(self.n), -scores))
        return order[:k].tolist()

    def dipr(self, q: np.ndarray, beta: float) -> set[int]:
        """Exact DIPR result; the flat index is the production oracle path."""
        return dipr_bruteforce(q, self._keys64, beta)


@dataclass
class GraphIndex:
    """Fixed-max-degree proximity graph over key vectors.

    ``adjacency[i]`` is an int32 array of neighbor node ids (no self loops,
    no duplicates, length <= max_degree). The graph is reachable from
    ``entry_point``. Instances are immutable after construction and safe to
    share across threads.
    """

    keys: np.ndarray
    adjacency: list[np.ndarray]
    entry_point: int
    max_degree: int
    _keys64: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.keys.shape[0]

    @property
    def keys64(self) -> np.ndarray:
        if self._keys64 is None:
            self._keys64 = self.keys.astype(np.float64)
        return self._keys64

    def neighbors(self, node: int) -> np.ndarray:
        return self.adjacency[node]

    def two_hop_table(self, cap: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Per-node 2-hop neighborhood as (flat ids, offsets), lazily built.

        Each node's entry holds its direct neighbors (adjacency order) plus
        its neighbors' neighbors, deduplicated by first occurrence and, when
        over ``cap`` ids, the overflow pruned to the strongest by inner
        product with the node. Prefix-filtered traversal slices this table
        instead of gathering conduit lists per visit.
        """
        cached = getattr(self, "_hop2", None)
        if cached is not None and cached[0] == cap:
            return cached[1], cached[2]
        keys64 = self.keys64
        pieces: list[np.ndarray] = []
        offsets = np.zeros(self.n + 1, dtype=np.int64)
        for u in range(self.n):
            nbrs = self.adjacency[u]
            ball = np.concatenate([nbrs] + [self.adjacency[v] for v in nbrs.tolist()]) \
                if nbrs.size else nbrs
            _, first = np.unique(ball, return_index=True)
            first.sort()
            ball = ball[first]
            ball = ball[ball != u]
            if ball.size > cap:
                head = nbrs.size
                extras = ball[head:]
                sims = keys64[extras] @ keys64[u]
                order = np.lexsort((extras, -sims))[: cap - head]
                ball = np.concatenate([ball[:head], extras[np.sort(order)]])
            pieces.append(ball.astype(np.int32))
            offsets[u + 1] = offsets[u] + ball.size
        flat = np.concatenate(pieces) if pieces else np.empty(0, dtype=np.int32)
        self._hop2 = (cap, flat, offsets)
        return flat, offsets

    def check_invariants(self) -> None:
        """Raise if any structural invariant is violated."""
        n = self.n
        if len(self.adjacency) != n:
            raise AssertionError("adjacency length != node count")
        if not 0 <= self.entry_point < n:
            raise AssertionError("entry point out of range")
        for u, nbrs in enumerate(self.adjacency):
            if len(nbrs) > self.max_degree:
                raise AssertionError(f"node {u} exceeds max degree")
            if len(nbrs) != len(set(nbrs.tolist())):
                raise AssertionError(f"node {u} has duplicate neighbors")
            if np.any(nbrs == u):
                raise AssertionError(f"node {u} has a self loop")
            if nbrs.size and (nbrs.min() < 0 or nbrs.max() >= n):
                raise AssertionError(f"node {u} has an out-of-range neighbor")
        if len(_reachable_from(self.adjacency, self.entry_point, n)) != n:
            raise AssertionError("graph is not fully reachable from the entry point")

    def search_topk(self, q: np.ndarray, k: int, ef: int | None = None) -> list[int]:
        """Approximate top-k token ids via best-first graph search."""
        if ef is None:
            ef = max(4 * k, 64)
        found = _graph_search(
            self.keys64, self.adjacency, q.astype(np.float64, copy=False),
            self.entry_point, max(ef, k),
        )
        found.sort(key=lambda sn: (-sn[0], sn[1]))
        return [node for _, node in found[:k]]

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Flatten adjacency into (degrees, concatenated neighbors) for storage."""
        degrees = np.array([len(a) for a in self.adjacency], dtype=np.int32)
        flat = (
            np.concatenate(self.adjacency).astype(np.int32)
            if self.n and degrees.sum() > 0
            else np.empty(0, dtype=np.int32)
        )
        return degrees, flat

    @classmethod
    def from_arrays(
        cls,
        keys: np.ndarray,
        degrees: np.ndarray,
        flat_neighbors: np.ndarray,
        entry_point: int,
        max_degree: int,
    ) -> "GraphIndex":
        bounds = np.concatenate([[0], np.cumsum(degrees)])
        adjacency = [
            flat_neighbors[bounds[i] : bounds[i + 1]].astype(np.int32)
            for i in range(len(degrees))
        ]
        return cls(keys=np.atleast_2d(keys), adjacency=adjacency,
                   entry_point=int(entry_point), max_degree=int(max_degree))


@dataclass
class BlockIndex:
    """Coarse index: contiguous token blocks scored by representative vectors."""

    block_size: int
    starts: np.ndarray
    ends: np.ndarray
    reps: list[np.ndarray]

    @property
    def n_blocks(self) -> int:
        return len(self.reps)

    def top_blocks(self, q: np.ndarray, k_blocks: int) -> list[tuple[int, int]]:
        """Best ``k_blocks`` token ranges by max representative inner product."""
        if not 1 <= k_blocks <= self.n_blocks:
            raise ValueError(f"k_blocks must be in [1, {self.n_blocks}], got {k_blocks}")
        scores = np.array([inner_products(r, q).max() for r in self.reps])
        order = np.lexsort((self.starts, -scores))
        return [(int(self.starts[i]), int(self.ends[i])) for i in order[:k_blocks]]


def select_representatives(block_keys: np.ndarray, r: int) -> np.ndarray:
    """The r keys with the largest L2 norms (ties by position).

    Large-norm keys upper-bound inner products over the block, which makes
    them a defensible stand-in for everything stored there.
    """
    block_keys = np.atleast_2d(block_keys)
    if not 1 <= r <= block_keys.shape[0]:
        raise ValueError(f"r must be in [1, {block_keys.shape[0]}], got {r}")
    norms = np.linalg.norm(block_keys.astype(np.float64), axis=1)
    order = np.lexsort((np.arange(block_keys.shape[0]), -norms))
    return block_keys[order[:r]]


def build_block_index(keys: np.ndarray, block_size: int, r: int) -> BlockIndex:
    """Partition 0..n-1 into contiguous blocks and pick representatives."""
    keys = np.atleast_2d(keys)
    if block_size < 1:
        raise ValueError("block_size must be positive")
    n = keys.shape[0]
    starts = np.arange(0, n, block_size, dtype=np.int64)
    ends = np.minimum(starts + block_size, n)
    reps = [
        select_representatives(keys[s:e], min(r, e - s))
        for s, e in zip(starts, ends)
    ]
    return BlockIndex(block_size=block_size, starts=starts, ends=ends, reps=reps)


def exact_knn(
    keys: np.ndarray, queries: np.ndarray, k: int, workers: int = 1
) -> np.ndarray:
    """Exact k nearest keys by inner product for each query, ranked descending.

    Brute force over chunked matrix products. ``workers`` > 1 fans chunks out
    over a thread pool with BLAS pinned to one thread per worker; ``workers``
    == 1 runs the chunks sequentially, also on one BLAS thread, so the two
    modes are comparable.
    """
    keys64 = keys.astype(np.float64)
    queries = np.atleast_2d(queries)
    nq = queries.shape[0]
    k = min(k, keys.shape[0])
    out = np.empty((nq, k), dtype=np.int32)
    chunk = 256

    def run_chunk(lo: int) -> None:
        hi = min(lo + chunk, nq)
        scores = queries[lo:hi].astype(np.float64) @ keys64.T
        part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
        part_scores = np.take_along_axis(scores, part, axis=1)
        order = np.argsort(-part_scores, axis=1, kind="stable")
        out[lo:hi] = np.take_along_axis(part, order, axis=1)

    limiter = threadpool_limits(limits=1) if threadpool_limits is not None else None
    try:
        if workers <= 1:
            for lo in range(0, nq, chunk):
                run_chunk(lo)
        else:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(run_chunk, range(0, nq, chunk)))
    finally:
        if limiter is not None:
            limiter.unregister()
    return out


def build_graph(
    keys: np.ndarray,
    sampled_queries: np.ndarray | None,
    params: GraphParams = GraphParams(),
) -> GraphIndex:
    """Build the proximity graph for a key set.

    With sampled queries: exact query-to-key kNN, bipartite projection into
    key-key edges, then per-key search-based enhancement. Without queries:
    incremental insertion build. Always ends with centroid entry-point
    selection and reachability repair.
    """
    keys = np.atleast_2d(keys)
    n = keys.shape[0]
    if n == 0:
        raise ValueError("cannot index an empty key set")
    keys64 = keys.astype(np.float64)

    if n == 1:
        return GraphIndex(keys=keys, adjacency=[np.empty(0, dtype=np.int32)],
                          entry_point=0, max_degree=params.max_degree)

    have_queries = sampled_queries is not None and len(sampled_queries) > 0
    if have_queries:
        knn = exact_knn(keys, np.atleast_2d(sampled_queries),
                        min(params.knn_k, n), workers=params.workers)
        adjacency = _project_bipartite(knn, n, keys64, params.max_degree)
        _enhance(keys64, adjacency, params)
    else:
        adjacency = _incremental_build(keys64, params)

    _diversify(keys64, adjacency, params.max_degree)
    entry = _centroid_entry(keys64)
    _ensure_reachable(keys64, adjacency, entry, params.max_degree)
    return GraphIndex(keys=keys, adjacency=adjacency, entry_point=entry,
                      max_degree=params.max_degree, _keys64=keys64)


def build_shared_graph(
    group_keys: np.ndarray,
    per_query_head_queries: list[np.ndarray],
    sample_ratio: float = 0.4,
    params: GraphParams = GraphParams(),
) -> GraphIndex:
    """One graph serving every query head of a grouped-query group.

    Samples ``ceil(sample_ratio * len)`` queries from each head (evenly
    spaced, deterministic), merges them, and builds a single graph that
    captures all heads' query distributions.
    """
    if not 0.0 < sample_ratio <= 1.0:
        raise ValueError(f"sample_ratio must be in (0, 1], got {sample_ratio}")
    sampled = []
    for head_queries in per_query_head_queries:
        head_queries = np.atleast_2d(head_queries)
        m = head_queries.shape[0]
        if m == 0:
            continue
        take = int(np.ceil(sample_ratio * m))
        idx = np.unique(np.round(np.linspace(0, m - 1, take)).astype(np.int64))
        sampled.append(head_queries[idx])
    merged = np.concatenate(sampled) if sampled else None
    return build_graph(group_keys, merged, params)


def index_memory_bytes(index: GraphIndex | FlatIndex | BlockIndex) -> int:
    """Resident bytes of an index's arrays (keys plus structure)."""
    if isinstance(index, GraphIndex):
        return index.keys.nbytes + sum(a.nbytes for a in index.adjacency) + 8
    if isinstance(index, FlatIndex):
        return index.keys.nbytes
    return int(sum(r.nbytes for r in index.reps) + index.starts.nbytes + index.ends.nbytes)


# ---------------------------------------------------------------------------
# construction internals


def _graph_search(
    keys64: np.ndarray,
    adjacency: list[np.ndarray],
    q64: np.ndarray,
    entry: int | list[int],
    ef: int,
    max_visits: int | None = None,
) -> list[tuple[float, int]]:
    """Best-first search; returns up to ``ef`` (score, node) pairs, unordered.

    ``max_visits`` caps the scored-node count, bounding per-search cost on
    poorly navigable intermediate graphs.
    """
    n = keys64.shape[0]
    if max_visits is None:
        max_visits = 16 * ef
    entries = [entry] if isinstance(entry, int) else list(dict.fromkeys(entry))
    visited = np.zeros(n, dtype=bool)
    candidates: list[tuple[float, int]] = []
    top: list[tuple[float, int]] = []
    for e in entries:
        visited[e] = True
        s0 = float(keys64[e] @ q64)
        heapq.heappush(candidates, (-s0, e))
        if len(top) < ef:
            heapq.heappush(top, (s0, e))
        elif s0 > top[0][0]:
            heapq.heapreplace(top, (s0, e))
    seen = len(entries)
    while candidates and seen < max_visits:
        neg, u = heapq.heappop(candidates)
        if len(top) >= ef and -neg < top[0][0]:
            break
        nbrs = adjacency[u]
        fresh = nbrs[~visited[nbrs]] if nbrs.size else nbrs
        if fresh.size == 0:
            continue
        visited[fresh] = True
        seen += fresh.size
        scores = keys64[fresh] @ q64
        heap_min = top[0][0]
        full = len(top) >= ef
        for node, s in zip(fresh.tolist(), scores.tolist()):
            if not full:
                heapq.heappush(top, (s, node))
                heapq.heappush(candidates, (-s, node))
                full = len(top) >= ef
                heap_min = top[0][0]
            elif s > heap_min:
                heapq.heapreplace(top, (s, node))
                heapq.heappush(candidates, (-s, node))
                heap_min = top[0][0]
    return top


def _topk_per_source(
    u: np.ndarray, v: np.ndarray, w: np.ndarray, cap: int, n: int
) -> list[np.ndarray]:
    """Per-source top-``cap`` targets by weight (ties by smaller target id)."""
    order = np.lexsort((v, -w, u))
    u_s, v_s = u[order], v[order]
    starts = np.searchsorted(u_s, np.arange(n), side="left")
    ends = np.searchsorted(u_s, np.arange(n), side="right")
    return [
        v_s[s : min(e, s + cap)].astype(np.int32)
        for s, e in zip(starts, ends)
    ]


def _project_bipartite(
    knn: np.ndarray, n: int, keys64: np.ndarray, max_degree: int
) -> list[np.ndarray]:
    """Project query-to-key kNN lists into a key-key neighbor graph.

    Keys co-retrieved by one query become edge candidates: each query's
    nearest key links to the rest of its list, and consecutive ranks link to
    each other. Candidates are made mutual, then pruned per key to the
    ``max_degree`` strongest by key-key inner product.
    """
    m = knn.shape[1]
    pieces_u = [np.repeat(knn[:, 0], m - 1), knn[:, :-1].ravel()]
    pieces_v = [knn[:, 1:].ravel(), knn[:, 1:].ravel()]
    u = np.concatenate(pieces_u).astype(np.int64)
    v = np.concatenate(pieces_v).astype(np.int64)
    # mutual candidates, deduplicated, self loops dropped
    uu = np.concatenate([u, v])
    vv = np.concatenate([v, u])
    keep = uu != vv
    uu, vv = uu[keep], vv[keep]
    pair = np.unique(uu * n + vv)
    uu, vv = pair // n, pair % n
    w = np.einsum("ij,ij->i", keys64[uu], keys64[vv])
    return _topk_per_source(uu, vv, w, max_degree, n)


def _merge_neighbors(
    keys64: np.ndarray, adjacency: list[np.ndarray], u: int,
    new_ids: np.ndarray, max_degree: int,
) -> None:
    """Union new neighbor candidates into node u, pruned to the strongest."""
    combined = np.unique(np.concatenate([adjacency[u], new_ids.astype(np.int32)]))
    combined = combined[combined != u]
    if combined.size <= max_degree:
        adjacency[u] = combined.astype(np.int32)
        return
    w = keys64[combined] @ keys64[u]
    order = np.lexsort((combined, -w))
    adjacency[u] = combined[order[:max_degree]].astype(np.int32)


def _enhance(
    keys64: np.ndarray, adjacency: list[np.ndarray], params: GraphParams,
    passes: int = 2,
) -> None:
    """Add approximate-nearest edges found by searching the graph from each key.

    Every key's search is seeded at the centroid entry and at the key itself,
    and the found neighbors are linked mutually, so coverage grows as the
    pass proceeds even when the projection skeleton left nodes bare. A second
    pass revisits early nodes against the completed graph.
    """
    n = keys64.shape[0]
    entry = _centroid_entry(keys64)
    budget = max(256, 4 * params.enhance_ef)
    for _ in range(passes):
        for u in range(n):
            found = _graph_search(keys64, adjacency, keys64[u], [entry, u],
                                  params.enhance_ef, max_visits=budget)
            found.sort(key=lambda sn: (-sn[0], sn[1]))
            near = np.array(
                [node for _, node in found if node != u][: params.enhance_k],
                dtype=np.int32,
            )
            if near.size == 0:
                continue
            _merge_neighbors(keys64, adjacency, u, near, params.max_degree)
            for v in near.tolist():
                _merge_neighbors(keys64, adjacency, v, np.array([u]), params.max_degree)


def _diversify(
    keys64: np.ndarray, adjacency: list[np.ndarray], max_degree: int,
    pool_cap: int = 96,
) -> None:
    """Re-prune every node's neighbors for direction diversity.

    Raw inner-product pruning concentrates every list on the same few
    large-norm hubs, which starves 2-hop expansion under prefix filters. This
    pass pools each node's out-edges with its reverse edges and keeps a
    neighbor only when no already-kept neighbor is more similar to it than
    the node itself is (skipped candidates backfill remaining capacity).
    """
    n = keys64.shape[0]
    degrees = np.array([len(a) for a in adjacency], dtype=np.int64)
    if degrees.sum() == 0:
        return
    src = np.repeat(np.arange(n, dtype=np.int64), degrees)
    dst = np.concatenate(adjacency).astype(np.int64)
    order = np.argsort(dst, kind="stable")
    rev_src, rev_dst = src[order], dst[order]
    starts = np.searchsorted(rev_dst, np.arange(n), side="left")
    ends = np.searchsorted(rev_dst, np.arange(n), side="right")

    for u in range(n):
        pool = np.unique(np.concatenate([adjacency[u], rev_src[starts[u] : ends[u]]]))
        pool = pool[pool != u]
        if pool.size <= max_degree:
            adjacency[u] = pool.astype(np.int32)
            continue
        sims = keys64[pool] @ keys64[u]
        rank = np.lexsort((pool, -sims))[:pool_cap]
        cand = pool[rank]
        cand_sims = sims[rank]
        mat = keys64[cand] @ keys64[cand].T
        kept: list[int] = []
        skipped: list[int] = []
        for i in range(cand.size):
            if len(kept) == max_degree:
                break
            if kept and (mat[i, kept] > cand_sims[i]).any():
                skipped.append(i)
                continue
            kept.append(i)
        for i in skipped:
            if len(kept) == max_degree:
                break
            kept.append(i)
        adjacency[u] = cand[np.array(kept, dtype=np.int64)].astype(np.int32)


def _incremental_build(keys64: np.ndarray, params: GraphParams) -> list[np.ndarray]:
    """Standard incremental proximity-graph insertion (no query vectors)."""
    n = keys64.shape[0]
    adjacency: list[np.ndarray] = [np.empty(0, dtype=np.int32) for _ in range(n)]
    budget = max(256, 4 * params.enhance_ef)
    for i in range(1, n):
        # nodes >= i have no in-edges yet, so the search stays within 0..i-1
        found = _graph_search(keys64, adjacency, keys64[i], 0,
                              params.enhance_ef, max_visits=budget)
        found.sort(key=lambda sn: (-sn[0], sn[1]))
        near = np.array([node for _, node in found][: params.max_degree], dtype=np.int32)
        adjacency[i] = near
        for v in near.tolist():
            _merge_neighbors(keys64, adjacency, v, np.array([i]), params.max_degree)
    return adjacency


def _centroid_entry(keys64: np.ndarray) -> int:
    """Node nearest (L2) to the key centroid; deterministic ties by id."""
    centroid = keys64.mean(axis=0)
    d2 = np.einsum("ij,ij->i", keys64, keys64) - 2.0 * (keys64 @ centroid)
    return int(np.argmin(d2))


def _reachable_from(adjacency: list[np.ndarray], entry: int, n: int) -> np.ndarray:
    seen = np.zeros(n, dtype=bool)
    seen[entry] = True
    frontier = [entry]
    while frontier:
        nxt: list[int] = []
        for u in frontier:
            nbrs = adjacency[u]
            fresh = nbrs[~seen[nbrs]] if nbrs.size else nbrs
            if fresh.size:
                seen[fresh] = True
                nxt.extend(fresh.tolist())
        frontier = nxt
    return np.flatnonzero(seen)


def _ensure_reachable(
    keys64: np.ndarray, adjacency: list[np.ndarray], entry: int, max_degree: int
) -> None:
    """Link unreachable nodes to their nearest reachable neighbor until the
    whole graph hangs off the entry point."""
    n = keys64.shape[0]
    protected: set[tuple[int, int]] = set()
    for _ in range(n):
        reach = _reachable_from(adjacency, entry, n)
        if reach.size == n:
            return
        unreached = np.setdiff1d(np.arange(n), reach, assume_unique=False)
        for lo in range(0, unreached.size, 256):
            block = unreached[lo : lo + 256]
            scores = keys64[reach] @ keys64[block].T
            order = np.argsort(-scores, axis=0, kind="stable")
            for col, u in enumerate(block.tolist()):
                for row in order[:8, col].tolist():
                    r = int(reach[row])
                    if _attach(keys64, adjacency, r, u, max_degree, protected):
                        protected.add((r, u))
                        break
    raise AssertionError("reachability repair did not converge")


def _attach(
    keys64: np.ndarray, adjacency: list[np.ndarray], r: int, u: int,
    max_degree: int, protected: set[tuple[int, int]],
) -> bool:
    """Add edge r -> u, evicting r's weakest unprotected edge when full."""
    nbrs = adjacency[r]
    if u in nbrs:
        return True
    if nbrs.size < max_degree:
        adjacency[r] = np.append(nbrs, np.int32(u))
        return True
    w = keys64[nbrs] @ keys64[r]
    order = np.argsort(w, kind="stable")
    for idx in order.tolist():
        if (r, int(nbrs[idx])) not in protected:
            out = nbrs.copy()
            out[idx] = u
            adjacency[r] = out
            return True
    return False
