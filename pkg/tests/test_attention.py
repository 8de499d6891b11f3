from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.special
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsekv.attention import (
    PartialAttention,
    full_attention,
    recovery_ratio,
    sparse_attention,
)


def naive_attention(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Independent 64-bit oracle: scipy softmax over explicit logits."""
    z = (keys.astype(np.float64) @ q.astype(np.float64)) / math.sqrt(q.shape[-1])
    w = scipy.special.softmax(z)
    return w @ values.astype(np.float64)


class TestFullAttention:
    def test_singleton_returns_value(self, rng):
        q = rng.standard_normal(2).astype(np.float32)
        k = rng.standard_normal((1, 2)).astype(np.float32)
        v = np.array([[7.0, 7.0]], dtype=np.float32)
        assert np.allclose(full_attention(q, k, v), [7.0, 7.0])

    def test_symmetric_keys_average_values(self):
        q = np.array([1.0, 0.0], dtype=np.float32)
        k = np.array([[3.5, 0.0], [3.5, 0.0]], dtype=np.float32)
        v = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        assert np.allclose(full_attention(q, k, v), [0.5, 0.5], atol=1e-7)

    def test_matches_naive_oracle(self, rng):
        for _ in range(25):
            n, d = int(rng.integers(2, 64)), 8
            q = rng.standard_normal(d).astype(np.float32)
            k = rng.standard_normal((n, d)).astype(np.float32)
            v = rng.standard_normal((n, d)).astype(np.float32)
            assert np.allclose(full_attention(q, k, v), naive_attention(q, k, v), atol=1e-5)

    def test_empty_keys_error(self, rng):
        q = rng.standard_normal(4).astype(np.float32)
        with pytest.raises(ValueError):
            full_attention(q, np.empty((0, 4), np.float32), np.empty((0, 4), np.float32))

    def test_length_mismatch_error(self, rng):
        q = rng.standard_normal(4).astype(np.float32)
        k = rng.standard_normal((3, 4)).astype(np.float32)
        v = rng.standard_normal((2, 4)).astype(np.float32)
        with pytest.raises(ValueError):
            full_attention(q, k, v)

    def test_output_in_value_hull(self, rng):
        n, d = 32, 6
        q = rng.standard_normal(d).astype(np.float32)
        k = rng.standard_normal((n, d)).astype(np.float32)
        v = rng.standard_normal((n, d)).astype(np.float32)
        o = full_attention(q, k, v)
        assert np.all(o >= v.min(axis=0) - 1e-6)
        assert np.all(o <= v.max(axis=0) + 1e-6)

    def test_affine_in_values(self, rng):
        n, d = 16, 4
        q = rng.standard_normal(d).astype(np.float32)
        k = rng.standard_normal((n, d)).astype(np.float32)
        v = rng.standard_normal((n, d)).astype(np.float32)
        shift = rng.standard_normal(d).astype(np.float32)
        o1 = full_attention(q, k, v)
        o2 = full_attention(q, k, v + shift)
        assert np.allclose(o2, o1 + shift, atol=1e-5)


class TestSparseAttention:
    def test_whole_set_equals_full(self, rng):
        n, d = 24, 8
        q = rng.standard_normal(d).astype(np.float32)
        k = rng.standard_normal((n, d)).astype(np.float32)
        v = rng.standard_normal((n, d)).astype(np.float32)
        selected = [(i, k[i], v[i]) for i in range(n)]
        assert np.allclose(sparse_attention(q, selected), full_attention(q, k, v), atol=1e-6)

    def test_single_token(self, rng):
        q = rng.standard_normal(3).astype(np.float32)
        k = rng.standard_normal(3).astype(np.float32)
        v = rng.standard_normal(3).astype(np.float32)
        assert np.allclose(sparse_attention(q, [(5, k, v)]), v, atol=1e-6)

    def test_top2_hand_case(self):
        # 2-D hand case: renormalized softmax over the two strongest tokens
        q = np.array([2.0, 0.0], dtype=np.float32)
        keys = np.array([[1.0, 0.0], [0.5, 0.0], [-3.0, 0.0]], dtype=np.float32)
        values = np.array([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]], dtype=np.float32)
        z0 = 2.0 * 1.0 / math.sqrt(2)
        z1 = 2.0 * 0.5 / math.sqrt(2)
        w0 = math.exp(z0) / (math.exp(z0) + math.exp(z1))
        expected = np.array([w0, 1.0 - w0])
        got = sparse_attention(q, [(0, keys[0], values[0]), (1, keys[1], values[1])])
        assert np.allclose(got, expected, atol=1e-6)

    def test_empty_selection_error(self, rng):
        with pytest.raises(ValueError):
            sparse_attention(rng.standard_normal(2).astype(np.float32), [])

    def test_duplicate_token_error(self, rng):
        k = rng.standard_normal(2).astype(np.float32)
        v = rng.standard_normal(2).astype(np.float32)
        q = rng.standard_normal(2).astype(np.float32)
        with pytest.raises(ValueError):
            sparse_attention(q, [(1, k, v), (1, k, v)])

    def test_weights_sum_to_one(self, rng):
        # renormalization check via the constant-value trick
        n, d = 12, 5
        q = rng.standard_normal(d).astype(np.float32)
        k = rng.standard_normal((n, d)).astype(np.float32)
        ones = np.ones((n, d), dtype=np.float32)
        selected = [(i, k[i], ones[i]) for i in range(0, n, 2)]
        assert np.allclose(sparse_attention(q, selected), 1.0, atol=1e-6)


class TestPartialAttention:
    def test_merge_with_empty_is_identity(self, rng):
        q = rng.standard_normal(4).astype(np.float32)
        k = rng.standard_normal((3, 4)).astype(np.float32)
        v = rng.standard_normal((3, 4)).astype(np.float32)
        p = PartialAttention.over(q, k, v)
        merged = p.merge(PartialAttention.empty())
        assert merged.m == p.m and merged.l == p.l
        assert np.array_equal(merged.acc, p.acc)
        merged2 = PartialAttention.empty().merge(p)
        assert np.array_equal(merged2.acc, p.acc)

    def test_split_halves_match_full(self, rng):
        n, d = 16, 8
        q = rng.standard_normal(d).astype(np.float32)
        k = rng.standard_normal((n, d)).astype(np.float32)
        v = rng.standard_normal((n, d)).astype(np.float32)
        left = PartialAttention.over(q, k[:8], v[:8])
        right = PartialAttention.over(q, k[8:], v[8:])
        assert np.allclose(left.merge(right).finalize(), full_attention(q, k, v), atol=1e-5)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_absorb_any_permutation(self, seed):
        r = np.random.default_rng(seed)
        n, d = int(r.integers(2, 20)), 4
        q = r.standard_normal(d).astype(np.float32)
        k = r.standard_normal((n, d)).astype(np.float32)
        v = r.standard_normal((n, d)).astype(np.float32)
        perm = r.permutation(n)
        p = PartialAttention.empty()
        for i in perm:
            p = p.absorb(q, k[i], v[i])
        assert np.allclose(p.finalize(), full_attention(q, k, v), atol=1e-5)

    @given(st.integers(0, 2**31 - 1), st.integers(2, 5))
    @settings(max_examples=30, deadline=None)
    def test_partition_then_merge_matches_full(self, seed, parts):
        r = np.random.default_rng(seed)
        n, d = int(r.integers(parts, 40)), 6
        q = r.standard_normal(d).astype(np.float32)
        k = r.standard_normal((n, d)).astype(np.float32)
        v = r.standard_normal((n, d)).astype(np.float32)
        bounds = np.sort(r.choice(np.arange(1, n), size=parts - 1, replace=False))
        merged = PartialAttention.empty()
        for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, n]):
            merged = merged.merge(PartialAttention.over(q, k[lo:hi], v[lo:hi]))
        assert np.allclose(merged.finalize(), full_attention(q, k, v), atol=1e-5)

    def test_merge_commutative(self, rng):
        q = rng.standard_normal(4).astype(np.float32)
        k = rng.standard_normal((10, 4)).astype(np.float32)
        v = rng.standard_normal((10, 4)).astype(np.float32)
        a = PartialAttention.over(q, k[:4], v[:4])
        b = PartialAttention.over(q, k[4:], v[4:])
        assert np.allclose(a.merge(b).finalize(), b.merge(a).finalize(), atol=1e-6)

    def test_finalize_empty_error(self):
        with pytest.raises(ValueError):
            PartialAttention.empty().finalize()

    def test_merge_dim_mismatch(self, rng):
        q2 = rng.standard_normal(2).astype(np.float32)
        q3 = rng.standard_normal(3).astype(np.float32)
        a = PartialAttention.over(q2, rng.standard_normal((2, 2)).astype(np.float32),
                                  rng.standard_normal((2, 2)).astype(np.float32))
        b = PartialAttention.over(q3, rng.standard_normal((2, 3)).astype(np.float32),
                                  rng.standard_normal((2, 3)).astype(np.float32))
        with pytest.raises(ValueError):
            a.merge(b)


class TestRecoveryRatio:
    def test_all_selected_is_one(self, rng):
        n, d = 20, 4
        q = rng.standard_normal(d).astype(np.float32)
        keys = rng.standard_normal((n, d)).astype(np.float32)
        assert recovery_ratio(q, keys, set(range(n))) == pytest.approx(1.0)

    def test_empty_selection_is_zero(self, rng):
        keys = rng.standard_normal((5, 4)).astype(np.float32)
        assert recovery_ratio(rng.standard_normal(4).astype(np.float32), keys, set()) == 0.0

    def test_log3_hand_case(self):
        # d=1 so scaled scores equal raw products: (ln 3, 0) -> softmax (3/4, 1/4)
        q = np.array([1.0], dtype=np.float32)
        keys = np.array([[math.log(3.0)], [0.0]], dtype=np.float32)
        assert recovery_ratio(q, keys, {0}) == pytest.approx(0.75, abs=1e-6)

    def test_out_of_range_selection(self, rng):
        keys = rng.standard_normal((5, 4)).astype(np.float32)
        with pytest.raises(ValueError):
            recovery_ratio(rng.standard_normal(4).astype(np.float32), keys, {5})
