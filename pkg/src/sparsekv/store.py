"""Context store and sessions: import, longest-common-prefix reuse, windowed
decode state, sparse multi-head attention, and late-materialized persistence.

A :class:`ContextStore` owns immutable per-(layer, kv head) K/V sequences
("contexts") with their retrieval indexes, persisted as block-structured
vector files. A :class:`Session` binds a reused context prefix to a growing
local window of freshly generated tokens: updates only ever touch the window
(the base context's index and on-disk bytes stay untouched) and a session is
materialized into a new reusable context only by an explicit ``store`` call.

Attention is grouped-query aware: query heads in a group retrieve from their
shared kv head's index, window tokens are always part of the selection, and
the base and window contributions are computed as separate partial-attention
states and merged.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import PartialAttention, full_attention
from .config import EngineConfig
from .core import ModelShape, WindowConfig
from .dipr import dipr_bruteforce, diprs
from .filtering import PrefixPredicate, filtered_diprs
from .index import (
    BlockIndex,
    FlatIndex,
    GraphIndex,
    build_block_index,
    build_graph,
    build_shared_graph,
)
from .planner import IndexKind, Plan, PlanRequest, QueryKind, plan as make_plan
from .vfs import BufferPool, read_vector_file, write_vector_file


def context_id_for(token_ids: np.ndarray, shape: ModelShape) -> str:
    """Deterministic content-derived context id (idempotent imports)."""
    h = hashlib.sha256()
    h.update(np.asarray(token_ids, dtype=np.int64).tobytes())
    h.update(f"{shape.n_layers}/{shape.n_kv_heads}/{shape.dim}".encode())
    return "ctx-" + h.hexdigest()[:16]


@dataclass
class ContextRecord:
    """Immutable imported context: prompt ids, per-head K/V, and indexes."""

    context_id: str
    token_ids: np.ndarray
    keys: np.ndarray  # (layers, kv heads, tokens, dim) float32
    values: np.ndarray
    shape: ModelShape
    plans: dict[int, Plan]
    indexes: dict[tuple[int, int], object] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    def check_invariants(self) -> None:
        n = self.length
        expect = (self.shape.n_layers, self.shape.n_kv_heads, n, self.shape.dim)
        if self.keys.shape != expect or self.values.shape != expect:
            raise AssertionError(f"K/V shape {self.keys.shape} != {expect}")
        for (layer, head), idx in self.indexes.items():
            if isinstance(idx, (FlatIndex, GraphIndex)) and idx.n != n:
                raise AssertionError(f"index ({layer},{head}) covers {idx.n} of {n} tokens")


@dataclass
class TwoSegmentView:
    """Logical K or V sequence: reused base prefix plus the session window."""

    base: np.ndarray
    extra: list[np.ndarray]

    def __len__(self) -> int:
        return self.base.shape[0] + len(self.extra)

    def materialize(self) -> np.ndarray:
        if not self.extra:
            return self.base
        tail = np.stack(self.extra)
        if self.base.shape[0] == 0:
            return tail
        return np.concatenate([self.base, tail])


class Session:
    """Live inference handle: a reused prefix plus a locally growing window.

    One session serves one logical request; it may move between threads but
    must not be used concurrently.
    """

    def __init__(
        self,
        store: "ContextStore",
        base: ContextRecord | None,
        reused_prefix_len: int,
    ):
        self._store = store
        self.base = base
        self.reused_prefix_len = reused_prefix_len
        shape = store.shape
        self._window_k: list[list[list[np.ndarray]]] = [
            [[] for _ in range(shape.n_kv_heads)] for _ in range(shape.n_layers)
        ]
        self._window_v: list[list[list[np.ndarray]]] = [
            [[] for _ in range(shape.n_kv_heads)] for _ in range(shape.n_layers)
        ]
        self._query_log: list[list[list[np.ndarray]]] = [
            [[] for _ in range(shape.n_query_heads)] for _ in range(shape.n_layers)
        ]
        self.generated_token_ids: list[int] = []
        self.plan_override: Plan | dict[int, Plan] | None = None
        self.last_diagnostics: dict = {}

    # -- state ---------------------------------------------------------

    @property
    def window_len(self) -> int:
        return len(self._window_k[0][0])

    @property
    def total_len(self) -> int:
        return self.reused_prefix_len + self.window_len

    def record_token(self, token_id: int) -> None:
        """Log the vocabulary id of a newly generated/ingested token."""
        self.generated_token_ids.append(int(token_id))

    def window_arrays(self, layer: int, kv_head: int) -> tuple[np.ndarray, np.ndarray]:
        shape = self._store.shape
        k_rows = self._window_k[layer][kv_head]
        if not k_rows:
            empty = np.empty((0, shape.dim), dtype=np.float32)
            return empty, empty
        return np.stack(k_rows), np.stack(self._window_v[layer][kv_head])

    def logged_queries(self, layer: int) -> list[np.ndarray]:
        shape = self._store.shape
        out = []
        for qh in range(shape.n_query_heads):
            rows = self._query_log[layer][qh]
            out.append(
                np.stack(rows) if rows else np.empty((0, shape.dim), dtype=np.float32)
            )
        return out

    # -- Table-style APIs ------------------------------------------------

    def update(
        self, q: np.ndarray, k: np.ndarray, v: np.ndarray, layer: int
    ) -> tuple[list[TwoSegmentView], list[TwoSegmentView]]:
        """Append one step's per-head K/V to the layer window.

        ``q`` is (query heads, dim), ``k``/``v`` are (kv heads, dim). The
        base context is never touched (late materialization); the returned
        views expose the logical full K/V (base prefix + window) per kv head
        for callers managing attention themselves.
        """
        shape = self._store.shape
        self._check_layer(layer)
        q = np.atleast_2d(np.asarray(q, dtype=np.float32))
        k = np.atleast_2d(np.asarray(k, dtype=np.float32))
        v = np.atleast_2d(np.asarray(v, dtype=np.float32))
        if q.shape != (shape.n_query_heads, shape.dim):
            raise ValueError(f"q must be {(shape.n_query_heads, shape.dim)}, got {q.shape}")
        if k.shape != (shape.n_kv_heads, shape.dim) or v.shape != k.shape:
            raise ValueError(f"k/v must be {(shape.n_kv_heads, shape.dim)}")
        for head in range(shape.n_kv_heads):
            self._window_k[layer][head].append(k[head])
            self._window_v[layer][head].append(v[head])
        for qh in range(shape.n_query_heads):
            self._query_log[layer][qh].append(q[qh])
        k_views, v_views = [], []
        for head in range(shape.n_kv_heads):
            base_k, base_v = self._base_arrays(layer, head)
            k_views.append(TwoSegmentView(base_k, self._window_k[layer][head]))
            v_views.append(TwoSegmentView(base_v, self._window_v[layer][head]))
        return k_views, v_views

    def attention(self, q: np.ndarray, layer: int) -> np.ndarray:
        """Sparse attention outputs for one layer, one row per query head.

        Per query head: retrieve critical tokens from the base prefix per the
        active plan, always include the window, compute the two partial
        attentions, merge, finalize.
        """
        shape = self._store.shape
        self._check_layer(layer)
        q = np.atleast_2d(np.asarray(q, dtype=np.float32))
        if q.shape != (shape.n_query_heads, shape.dim):
            raise ValueError(f"q must be {(shape.n_query_heads, shape.dim)}, got {q.shape}")
        if self.total_len == 0:
            raise ValueError("attention on an empty session")

        active = self.active_plan(layer)
        outputs = np.empty((shape.n_query_heads, shape.dim), dtype=np.float32)
        diagnostics = []
        for qh in range(shape.n_query_heads):
            head = shape.kv_head_of(qh)
            o, info = self._head_attention(q[qh], layer, head, active)
            outputs[qh] = o
            info["query_head"] = qh
            diagnostics.append(info)
        self.last_diagnostics = {"layer": layer, "plan": active, "heads": diagnostics}
        return outputs

    # -- internals -------------------------------------------------------

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self._store.shape.n_layers:
            raise ValueError(f"layer {layer} out of range")

    def _base_arrays(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        p = self.reused_prefix_len
        if self.base is None or p == 0:
            empty = np.empty((0, self._store.shape.dim), dtype=np.float32)
            return empty, empty
        return self.base.keys[layer, head, :p], self.base.values[layer, head, :p]

    def active_plan(self, layer: int) -> Plan:
        """Plan in force for a layer: override (global or per layer) else planned."""
        if isinstance(self.plan_override, dict):
            if layer in self.plan_override:
                return self.plan_override[layer]
        elif self.plan_override is not None:
            return self.plan_override
        partial = (
            self.base is not None
            and 0 < self.reused_prefix_len < self.base.length
            and self.reused_prefix_len < self.total_len
        )
        req = PlanRequest(
            context_len=self.total_len,
            layer=layer,
            shape=self._store.shape,
            memory_budget_bytes=self._store.config.memory_budget_bytes,
            reused_prefix_len=self.reused_prefix_len if partial else None,
        )
        return make_plan(req, self._store.config.planner_config())

    def _head_attention(
        self, q: np.ndarray, layer: int, head: int, active: Plan
    ) -> tuple[np.ndarray, dict]:
        cfg = self._store.config
        p = self.reused_prefix_len
        base_k, base_v = self._base_arrays(layer, head)
        win_k, win_v = self.window_arrays(layer, head)

        window_ids = WindowConfig(cfg.window_initial, cfg.window_last).base_ids(p)

        if active.query is QueryKind.FULL_ATTENTION:
            keys = np.concatenate([base_k, win_k]) if win_k.size else base_k
            values = np.concatenate([base_v, win_v]) if win_v.size else base_v
            o = full_attention(q, keys, values)
            info = {"selected_base": list(range(p)), "window_base": window_ids.tolist(),
                    "retrieved": p}
            return o, info

        retrieved = self._retrieve(q, layer, head, active, p)
        selected = np.setdiff1d(
            np.fromiter(retrieved, dtype=np.int64, count=len(retrieved)), window_ids
        )
        part = PartialAttention.empty()
        if selected.size:
            part = part.merge(
                PartialAttention.over(q, base_k[selected], base_v[selected])
            )
        win_keys = [base_k[window_ids]] if window_ids.size else []
        win_vals = [base_v[window_ids]] if window_ids.size else []
        if win_k.size:
            win_keys.append(win_k)
            win_vals.append(win_v)
        if win_keys:
            part = part.merge(
                PartialAttention.over(q, np.concatenate(win_keys), np.concatenate(win_vals))
            )
        info = {
            "selected_base": np.sort(selected).tolist(),
            "window_base": window_ids.tolist(),
            "retrieved": len(retrieved),
        }
        return part.finalize(), info

    def _retrieve(
        self, q: np.ndarray, layer: int, head: int, active: Plan, p: int
    ) -> set[int]:
        """Critical token ids within the base prefix, per the active plan."""
        if p == 0:
            return set()
        cfg = self._store.config
        base_k, _ = self._base_arrays(layer, head)
        index = self.base.indexes.get((layer, head)) if self.base else None

        if active.query is QueryKind.TOP_K and isinstance(index, BlockIndex):
            k_tokens = active.k or cfg.top_k
            want = max(1, -(-k_tokens // index.block_size))
            ranges = index.top_blocks(q, min(want, index.n_blocks))
            out: set[int] = set()
            for lo, hi in ranges:
                out.update(range(lo, min(hi, p)))
            return out

        if active.query is QueryKind.TOP_K:
            k_tokens = min(active.k or cfg.top_k, p)
            if isinstance(index, GraphIndex) and p == index.n:
                return set(index.search_topk(q, k_tokens))
            flat = index if isinstance(index, FlatIndex) else FlatIndex(base_k)
            return set(flat.top_k(q, k_tokens))

        beta = active.beta if active.beta is not None else cfg.beta

        if active.query is QueryKind.FILTERED_DIPR and isinstance(index, GraphIndex):
            pred = PrefixPredicate(active.prefix_len or p)
            return filtered_diprs(
                index, q, pred, cfg.l0, beta,
                two_hop_threshold=cfg.two_hop_threshold,
                two_hop_fanout=cfg.two_hop_fanout,
                always_two_hop=cfg.always_two_hop,
            )

        if active.query is QueryKind.DIPR and isinstance(index, GraphIndex) and p == index.n:
            window_max = self._window_score_max(q, layer, head, p)
            return diprs(index, q, index.entry_point, cfg.l0, beta, window_max=window_max)

        # flat execution: exact DIPR over the admitted prefix
        return dipr_bruteforce(q, base_k, beta)

    def _window_score_max(self, q: np.ndarray, layer: int, head: int, p: int) -> float | None:
        cfg = self._store.config
        base_k, _ = self._base_arrays(layer, head)
        win_k, _ = self.window_arrays(layer, head)
        window_ids = WindowConfig(cfg.window_initial, cfg.window_last).base_ids(p)
        parts = []
        if window_ids.size:
            parts.append(base_k[window_ids])
        if win_k.size:
            parts.append(win_k)
        if not parts:
            return None
        stacked = np.concatenate(parts).astype(np.float64)
        return float((stacked @ q.astype(np.float64)).max())

    def full_kv(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        """Materialized logical K/V for one head (oracle/debug path)."""
        base_k, base_v = self._base_arrays(layer, head)
        win_k, win_v = self.window_arrays(layer, head)
        k = np.concatenate([base_k, win_k]) if win_k.size else base_k
        v = np.concatenate([base_v, win_v]) if win_v.size else base_v
        return k, v


class ContextStore:
    """The "DB": every imported context plus the machinery to reuse them.

    Concurrent reads are safe once contexts are imported; imports and stores
    are expected to be serialized by the caller (single writer).
    """

    def __init__(
        self,
        shape: ModelShape,
        config: EngineConfig | None = None,
        root: str | Path | None = None,
        pool: BufferPool | None = None,
    ):
        self.shape = shape
        self.config = config or EngineConfig()
        self.root = Path(root) if root is not None else None
        self.pool = pool
        self.contexts: dict[str, ContextRecord] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._load_existing()

    # -- DB APIs ---------------------------------------------------------

    def import_context(
        self,
        token_ids,
        keys: np.ndarray,
        values: np.ndarray,
        queries: np.ndarray | None = None,
    ) -> str:
        """Import a computed context; builds indexes and persists it.

        ``keys``/``values`` are (layers, kv heads, tokens, dim);
        ``queries``, when available, is (layers, query heads, m, dim) and
        feeds grouped-query shared graph construction. Importing identical
        token ids again returns the existing context id.
        """
        token_ids = np.asarray(token_ids, dtype=np.int64)
        cid = context_id_for(token_ids, self.shape)
        if cid in self.contexts:
            return cid
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        n = token_ids.shape[0]
        expect = (self.shape.n_layers, self.shape.n_kv_heads, n, self.shape.dim)
        if keys.shape != expect or values.shape != expect:
            raise ValueError(f"K/V must have shape {expect}, got {keys.shape}")

        record = ContextRecord(
            context_id=cid, token_ids=token_ids, keys=keys, values=values,
            shape=self.shape, plans=self._plans_for(n),
        )
        self._build_indexes(record, queries)
        record.check_invariants()
        self.contexts[cid] = record
        if self.root is not None:
            self._persist(record)
        return record.context_id

    def create_session(self, token_ids) -> tuple[Session, list[int]]:
        """Session reusing the longest common prefix among stored contexts.

        Returns the session and the suffix of ``token_ids`` not covered by
        the reused prefix. Ties prefer the most recently stored context.
        """
        token_ids = np.asarray(token_ids, dtype=np.int64)
        best: ContextRecord | None = None
        best_len = 0
        for record in self.contexts.values():  # insertion order; later wins ties
            lcp = _common_prefix_len(token_ids, record.token_ids)
            if lcp >= best_len and lcp > 0:
                best, best_len = record, lcp
        session = Session(self, best, best_len)
        return session, token_ids[best_len:].tolist()

    def store(self, session: Session) -> str:
        """Materialize a session (base prefix + window) into a new context."""
        p = session.reused_prefix_len
        if session.total_len == 0:
            raise ValueError("cannot store an empty session")
        shape = self.shape
        base_tokens = (
            session.base.token_ids[:p] if session.base is not None else
            np.empty(0, dtype=np.int64)
        )
        token_ids = np.concatenate(
            [base_tokens, np.asarray(session.generated_token_ids, dtype=np.int64)]
        )
        if token_ids.shape[0] != session.total_len:
            raise ValueError(
                f"recorded token ids ({token_ids.shape[0]}) do not cover the "
                f"session length ({session.total_len}); call record_token per step"
            )
        n = session.total_len
        keys = np.empty((shape.n_layers, shape.n_kv_heads, n, shape.dim), dtype=np.float32)
        values = np.empty_like(keys)
        for layer in range(shape.n_layers):
            for head in range(shape.n_kv_heads):
                base_k, base_v = session._base_arrays(layer, head)
                win_k, win_v = session.window_arrays(layer, head)
                keys[layer, head] = (
                    np.concatenate([base_k, win_k]) if win_k.size else base_k
                )
                values[layer, head] = (
                    np.concatenate([base_v, win_v]) if win_v.size else base_v
                )
        queries = np.stack(
            [
                np.stack([_pad_queries(qs, n, shape.dim) for qs in session.logged_queries(layer)])
                for layer in range(shape.n_layers)
            ]
        ) if any(session._query_log[0][qh] for qh in range(shape.n_query_heads)) else None
        return self.import_context(token_ids, keys, values, queries)

    def get(self, context_id: str) -> ContextRecord:
        return self.contexts[context_id]

    # -- internals ---------------------------------------------------------

    def _plans_for(self, n: int) -> dict[int, Plan]:
        cfg = self.config.planner_config()
        return {
            layer: make_plan(
                PlanRequest(
                    context_len=n, layer=layer, shape=self.shape,
                    memory_budget_bytes=self.config.memory_budget_bytes,
                ),
                cfg,
            )
            for layer in range(self.shape.n_layers)
        }

    def _build_indexes(self, record: ContextRecord, queries: np.ndarray | None) -> None:
        cfg = self.config
        params = cfg.graph_params()
        for layer, layer_plan in record.plans.items():
            kind = layer_plan.index
            for head in range(self.shape.n_kv_heads):
                keys = record.keys[layer, head]
                if kind is IndexKind.FLAT:
                    record.indexes[(layer, head)] = FlatIndex(keys)
                elif kind is IndexKind.COARSE:
                    record.indexes[(layer, head)] = build_block_index(
                        keys, cfg.block_size, cfg.representatives
                    )
                elif kind is IndexKind.FINE:
                    if queries is not None:
                        group = [
                            np.atleast_2d(queries[layer, qh])
                            for qh in self.shape.query_heads_of(head)
                        ]
                        record.indexes[(layer, head)] = build_shared_graph(
                            keys, group, cfg.sample_ratio, params
                        )
                    else:
                        record.indexes[(layer, head)] = build_graph(keys, None, params)

    def context_dir(self, context_id: str) -> Path:
        if self.root is None:
            raise ValueError("store has no persistence root")
        return self.root / "contexts" / context_id

    def _persist(self, record: ContextRecord) -> None:
        out = self.context_dir(record.context_id)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tokens.bin").write_bytes(record.token_ids.tobytes())
        meta = {
            "context_id": record.context_id,
            "n_tokens": record.length,
            "shape": {
                "n_layers": self.shape.n_layers,
                "n_query_heads": self.shape.n_query_heads,
                "n_kv_heads": self.shape.n_kv_heads,
                "dim": self.shape.dim,
            },
            "element_width": self.config.element_width,
            "plans": {
                str(layer): {"query": p.query.value, "index": p.index.value}
                for layer, p in record.plans.items()
            },
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        for layer in range(self.shape.n_layers):
            for head in range(self.shape.n_kv_heads):
                index = record.indexes.get((layer, head))
                adjacency = entry = degree = None
                if isinstance(index, GraphIndex):
                    adjacency = index.adjacency
                    entry = index.entry_point
                    degree = index.max_degree
                write_vector_file(
                    out / f"L{layer}H{head}.k.avdb",
                    record.keys[layer, head],
                    adjacency=adjacency,
                    entry_point=entry or 0,
                    max_degree=degree or 0,
                    element_width=self.config.element_width,
                )
                write_vector_file(
                    out / f"L{layer}H{head}.v.avdb",
                    record.values[layer, head],
                    element_width=self.config.element_width,
                )

    def _load_existing(self) -> None:
        base = self.root / "contexts"
        if not base.exists():
            return
        for ctx_dir in sorted(base.iterdir()):
            meta_path = ctx_dir / "meta.json"
            if not meta_path.exists():
                continue
            meta = json.loads(meta_path.read_text())
            token_ids = np.frombuffer((ctx_dir / "tokens.bin").read_bytes(), dtype=np.int64)
            n = meta["n_tokens"]
            keys = np.empty(
                (self.shape.n_layers, self.shape.n_kv_heads, n, self.shape.dim),
                dtype=np.float32,
            )
            values = np.empty_like(keys)
            record = ContextRecord(
                context_id=meta["context_id"], token_ids=token_ids,
                keys=keys, values=values, shape=self.shape,
                plans=self._plans_for(n),
            )
            for layer in range(self.shape.n_layers):
                for head in range(self.shape.n_kv_heads):
                    k_file = read_vector_file(ctx_dir / f"L{layer}H{head}.k.avdb", self.pool)
                    v_file = read_vector_file(ctx_dir / f"L{layer}H{head}.v.avdb", self.pool)
                    keys[layer, head] = k_file.vectors
                    values[layer, head] = v_file.vectors
                    kind = record.plans[layer].index
                    if k_file.adjacency is not None:
                        record.indexes[(layer, head)] = GraphIndex(
                            keys=keys[layer, head], adjacency=k_file.adjacency,
                            entry_point=k_file.entry_point, max_degree=k_file.max_degree,
                        )
                    elif kind is IndexKind.FLAT:
                        record.indexes[(layer, head)] = FlatIndex(keys[layer, head])
                    elif kind is IndexKind.COARSE:
                        record.indexes[(layer, head)] = build_block_index(
                            keys[layer, head], self.config.block_size,
                            self.config.representatives,
                        )
            self.contexts[record.context_id] = record


def _common_prefix_len(a: np.ndarray, b: np.ndarray) -> int:
    m = min(a.shape[0], b.shape[0])
    if m == 0:
        return 0
    neq = np.flatnonzero(a[:m] != b[:m])
    return int(neq[0]) if neq.size else m


def _pad_queries(qs: np.ndarray, n: int, dim: int) -> np.ndarray:
    return qs if qs.size else np.empty((0, dim), dtype=np.float32)
