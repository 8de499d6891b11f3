from __future__ import annotations

import hashlib

import numpy as np
import pytest

from sparsekv.attention import full_attention
from sparsekv.config import EngineConfig
from sparsekv.core import ModelShape
from sparsekv.planner import IndexKind, Plan, QueryKind
from sparsekv.store import ContextStore, context_id_for
from sparsekv.workload import WorkloadSpec, decode_step_inputs, make_context

SHAPE = ModelShape(n_layers=2, n_query_heads=4, n_kv_heads=2, dim=16)


def small_config(**kw) -> EngineConfig:
    base = dict(window_initial=4, window_last=8, l0=64, beta=8.0,
                max_degree=8, knn_k=8, enhance_ef=16, block_size=16,
                representatives=2, short_context_threshold=64)
    base.update(kw)
    return EngineConfig(**base)


def synthetic(n_tokens: int, seed: int = 0, shape: ModelShape = SHAPE):
    spec = WorkloadSpec(n_tokens=n_tokens, shape=shape, seed=seed, clusters=6)
    ctx = make_context(spec)
    return spec, ctx


class TestImport:
    def test_idempotent(self, tmp_path):
        spec, ctx = synthetic(100)
        db = ContextStore(SHAPE, small_config(), root=tmp_path)
        a = db.import_context(ctx.token_ids, ctx.keys, ctx.values)
        b = db.import_context(ctx.token_ids, ctx.keys, ctx.values)
        assert a == b
        assert len(db.contexts) == 1

    def test_shape_mismatch_rejected(self):
        spec, ctx = synthetic(50)
        db = ContextStore(SHAPE, small_config())
        with pytest.raises(ValueError):
            db.import_context(ctx.token_ids, ctx.keys[:, :1], ctx.values[:, :1])

    def test_context_id_content_derived(self):
        tokens = np.arange(40, dtype=np.int64)
        assert context_id_for(tokens, SHAPE) == context_id_for(tokens.copy(), SHAPE)
        assert context_id_for(tokens, SHAPE) != context_id_for(tokens + 1, SHAPE)

    def test_persisted_roundtrip_bit_exact(self, tmp_path):
        spec, ctx = synthetic(120, seed=3)
        db = ContextStore(SHAPE, small_config(), root=tmp_path)
        cid = db.import_context(ctx.token_ids, ctx.keys, ctx.values)
        reopened = ContextStore(SHAPE, small_config(), root=tmp_path)
        record = reopened.get(cid)
        assert np.array_equal(record.keys, ctx.keys)
        assert np.array_equal(record.values, ctx.values)
        assert np.array_equal(record.token_ids, ctx.token_ids)
        record.check_invariants()

    def test_plans_follow_planner(self):
        spec, ctx = synthetic(100)
        db = ContextStore(SHAPE, small_config(short_context_threshold=64))
        cid = db.import_context(ctx.token_ids, ctx.keys, ctx.values)
        plans = db.get(cid).plans
        assert plans[0].index is IndexKind.FLAT  # first layer
        assert plans[1].index is IndexKind.FINE


class TestCreateSession:
    def test_prefix_match(self):
        db = ContextStore(SHAPE, small_config())
        spec, ctx = synthetic(60)
        db.import_context(ctx.token_ids, ctx.keys, ctx.values)
        probe = np.concatenate([ctx.token_ids[:43], [999999]])
        session, truncated = db.create_session(probe)
        assert session.reused_prefix_len == 43
        assert truncated == [999999]

    def test_disjoint_input_no_base(self):
        db = ContextStore(SHAPE, small_config())
        spec, ctx = synthetic(60)
        db.import_context(ctx.token_ids, ctx.keys, ctx.values)
        session, truncated = db.create_session([7_000_001, 7_000_002])
        assert session.base is None
        assert truncated == [7_000_001, 7_000_002]

    def test_exact_match_empty_truncation(self):
        db = ContextStore(SHAPE, small_config())
        spec, ctx = synthetic(60)
        db.import_context(ctx.token_ids, ctx.keys, ctx.values)
        session, truncated = db.create_session(ctx.token_ids)
        assert truncated == []
        assert session.reused_prefix_len == 60

    def test_longest_prefix_oracle(self, rng):
        db = ContextStore(SHAPE, small_config())
        stored = []
        for seed in range(4):
            spec, ctx = synthetic(50, seed=seed)
            db.import_context(ctx.token_ids, ctx.keys, ctx.values)
            stored.append(ctx.token_ids)
        for _ in range(20):
            base = stored[int(rng.integers(0, 4))]
            cut = int(rng.integers(0, 51))
            probe = np.concatenate([base[:cut], rng.integers(10**6, 10**7, size=5)])
            session, truncated = db.create_session(probe)
            oracle = max(
                (_lcp(probe, s) for s in stored), default=0
            )
            assert session.reused_prefix_len == oracle
            assert len(truncated) == len(probe) - oracle


def _lcp(a, b) -> int:
    m = min(len(a), len(b))
    for i in range(m):
        if a[i] != b[i]:
            return i
    return m


class TestSessionUpdate:
    def test_views_cover_prefix_plus_window(self):
        db = ContextStore(SHAPE, small_config())
        spec, ctx = synthetic(60)
        db.import_context(ctx.token_ids, ctx.keys, ctx.values)
        session, _ = db.create_session(ctx.token_ids)
        _, qs, ks, vs = decode_step_inputs(spec, 5, ctx.centers)
        for step in range(5):
            k_views, v_views = session.update(qs[step, 0], ks[step, 0], vs[step, 0], 0)
        assert len(k_views) == SHAPE.n_kv_heads
        assert len(k_views[0]) == 60 + 5
        assert k_views[0].materialize().shape == (65, SHAPE.dim)
        assert np.array_equal(k_views[0].materialize()[:60], ctx.keys[0, 0])

    def test_base_arrays_untouched(self):
        db = ContextStore(SHAPE, small_config())
        spec, ctx = synthetic(60)
        cid = db.import_context(ctx.token_ids, ctx.keys, ctx.values)
        before = hashlib.sha256(db.get(cid).keys.tobytes()).hexdigest()
        session, _ = db.create_session(ctx.token_ids)
        _, qs, ks, vs = decode_step_inputs(spec, 50, ctx.centers)
        for step in range(50):
            for layer in range(SHAPE.n_layers):
                session.update(qs[step, layer], ks[step, layer], vs[step, layer], layer)
        assert hashlib.sha256(db.get(cid).keys.tobytes()).hexdigest() == before

    def test_dim_mismatch_rejected(self):
        db = ContextStore(SHAPE, small_config())
        session, _ = db.create_session([1, 2, 3])
        bad = np.zeros((SHAPE.n_kv_heads, SHAPE.dim + 1), dtype=np.float32)
        q = np.zeros((SHAPE.n_query_heads, SHAPE.dim), dtype=np.float32)
        with pytest.raises(ValueError):
            session.update(q, bad, bad, 0)

    def test_layer_out_of_range(self):
        db = ContextStore(SHAPE, small_config())
        session, _ = db.create_session([1])
        q = np.zeros((SHAPE.n_query_heads, SHAPE.dim), dtype=np.float32)
        k = np.zeros((SHAPE.n_kv_heads, SHAPE.dim), dtype=np.float32)
        with pytest.raises(ValueError):
            session.update(q, k, k, SHAPE.n_layers)


class TestSessionAttention:
    def _session_with_steps(self, n_tokens=120, steps=3, cfg=None, seed=0):
        cfg = cfg or small_config()
        db = ContextStore(SHAPE, cfg)
        spec, ctx = synthetic(n_tokens, seed=seed)
        db.import_context(ctx.token_ids, ctx.keys, ctx.values)
        session, _ = db.create_session(ctx.token_ids)
        tids, qs, ks, vs = decode_step_inputs(spec, steps, ctx.centers)
        last_q = None
        for step in range(steps):
            for layer in range(SHAPE.n_layers):
                session.update(qs[step, layer], ks[step, layer], vs[step, layer], layer)
            session.record_token(int(tids[step]))
            last_q = qs[step]
        return db, session, last_q

    def test_full_plan_matches_library_full_attention(self):
        db, session, q = self._session_with_steps()
        session.plan_override = Plan(QueryKind.FULL_ATTENTION, IndexKind.NONE)
        for layer in range(SHAPE.n_layers):
            out = session.attention(q[layer], layer)
            for qh in range(SHAPE.n_query_heads):
                head = SHAPE.kv_head_of(qh)
                keys, values = session.full_kv(layer, head)
                oracle = full_attention(q[layer, qh], keys, values)
                assert np.allclose(out[qh], oracle, atol=1e-5)

    def test_huge_beta_dipr_equals_full(self):
        db, session, q = self._session_with_steps()
        session.plan_override = Plan(QueryKind.FULL_ATTENTION, IndexKind.NONE)
        full = session.attention(q[1], 1)
        session.plan_override = Plan(QueryKind.DIPR, IndexKind.FINE, beta=1e9)
        sparse = session.attention(q[1], 1)
        assert np.allclose(full, sparse, atol=1e-5)

    def test_single_token_session(self):
        db = ContextStore(SHAPE, small_config())
        session, _ = db.create_session([5])
        rngl = np.random.default_rng(0)
        q = rngl.standard_normal((SHAPE.n_query_heads, SHAPE.dim)).astype(np.float32)
        k = rngl.standard_normal((SHAPE.n_kv_heads, SHAPE.dim)).astype(np.float32)
        v = rngl.standard_normal((SHAPE.n_kv_heads, SHAPE.dim)).astype(np.float32)
        session.update(q, k, v, 0)
        session.update(q, k, v, 1)
        out = session.attention(q, 0)
        for qh in range(SHAPE.n_query_heads):
            assert np.allclose(out[qh], v[SHAPE.kv_head_of(qh)], atol=1e-6)

    def test_empty_session_error(self):
        db = ContextStore(SHAPE, small_config())
        session, _ = db.create_session([1, 2])
        q = np.zeros((SHAPE.n_query_heads, SHAPE.dim), dtype=np.float32)
        with pytest.raises(ValueError):
            session.attention(q, 0)

    def test_window_always_selected(self):
        # the newest token is in the window and therefore always visible
        db, session, q = self._session_with_steps(steps=2)
        out = session.attention(q[0], 0)
        diag = session.last_diagnostics
        assert diag["plan"].query in (QueryKind.DIPR, QueryKind.TOP_K)
        assert all(info["retrieved"] >= 0 for info in diag["heads"])
        assert out.shape == (SHAPE.n_query_heads, SHAPE.dim)

    def test_coarse_plan_runs(self):
        cfg = small_config(memory_budget_bytes=10**12)
        db, session, q = self._session_with_steps(cfg=cfg)
        assert session.active_plan(1).index is IndexKind.COARSE
        out = session.attention(q[1], 1)
        assert np.isfinite(out).all()


class TestStoreSession:
    def test_store_then_full_reuse(self):
        db = ContextStore(SHAPE, small_config())
        spec, ctx = synthetic(80)
        db.import_context(ctx.token_ids, ctx.keys, ctx.values)
        session, _ = db.create_session(ctx.token_ids)
        tids, qs, ks, vs = decode_step_inputs(spec, 6, ctx.centers)
        for step in range(6):
            for layer in range(SHAPE.n_layers):
                session.update(qs[step, layer], ks[step, layer], vs[step, layer], layer)
            session.record_token(int(tids[step]))
        new_id = db.store(session)
        stored = db.get(new_id)
        stored.check_invariants()
        assert stored.length == 86
        again, truncated = db.create_session(stored.token_ids)
        assert truncated == []
        assert again.reused_prefix_len == 86
        # original base unchanged
        assert db.get(db.contexts[list(db.contexts)[0]].context_id).length == 80

    def test_store_without_base(self):
        db = ContextStore(SHAPE, small_config())
        session, _ = db.create_session([42, 43])
        rngl = np.random.default_rng(1)
        for step in range(3):
            q = rngl.standard_normal((SHAPE.n_query_heads, SHAPE.dim)).astype(np.float32)
            k = rngl.standard_normal((SHAPE.n_kv_heads, SHAPE.dim)).astype(np.float32)
            v = rngl.standard_normal((SHAPE.n_kv_heads, SHAPE.dim)).astype(np.float32)
            for layer in range(SHAPE.n_layers):
                session.update(q, k, v, layer)
            session.record_token(100 + step)
        cid = db.store(session)
        assert db.get(cid).length == 3
        assert db.get(cid).token_ids.tolist() == [100, 101, 102]

    def test_store_empty_session_error(self):
        db = ContextStore(SHAPE, small_config())
        session, _ = db.create_session([1])
        with pytest.raises(ValueError):
            db.store(session)
