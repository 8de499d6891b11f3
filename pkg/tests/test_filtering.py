from __future__ import annotations

import numpy as np
import pytest

from sparsekv.core import ModelShape
from sparsekv.dipr import dipr_bruteforce, diprs
from sparsekv.filtering import PrefixPredicate, filtered_diprs, remap_start
from sparsekv.index import GraphParams, build_graph
from sparsekv.workload import WorkloadSpec, make_context, make_queries


@pytest.fixture(scope="module")
def corpus():
    shape = ModelShape(1, 1, 1, 32)
    spec = WorkloadSpec(n_tokens=3000, shape=shape, seed=31)
    ctx = make_context(spec)
    keys = ctx.keys[0, 0]
    graph = build_graph(keys, make_queries(spec, 1200, ctx.centers, stream=5),
                        GraphParams(enhance_ef=48))
    queries = make_queries(spec, 60, ctx.centers, stream=6)
    return keys, graph, queries


class TestPrefixPredicate:
    def test_admits_below_only(self):
        pred = PrefixPredicate(5)
        assert pred.admits(0) and pred.admits(4)
        assert not pred.admits(5) and not pred.admits(100)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            PrefixPredicate(0)


class TestFilteredDiprs:
    def test_never_returns_non_admitted(self, corpus):
        keys, graph, queries = corpus
        for prefix in (1, 7, 300, 1500, 2999):
            pred = PrefixPredicate(prefix)
            for q in queries[:20]:
                got = filtered_diprs(graph, q, pred, l0=64, beta=6.0)
                assert all(t < prefix for t in got)

    def test_prefix_one_returns_token_zero(self, corpus):
        keys, graph, queries = corpus
        got = filtered_diprs(graph, queries[0], PrefixPredicate(1), l0=16, beta=4.0)
        assert got == {0}

    def test_full_reuse_equals_plain_diprs(self, corpus):
        # the contract requires agreement on >= 95% of queries; the
        # implementation traverses identically at full reuse, so expect 100%
        keys, graph, queries = corpus
        n = keys.shape[0]
        agree = sum(
            filtered_diprs(graph, q, PrefixPredicate(n), l0=128, beta=6.0)
            == diprs(graph, q, graph.entry_point, l0=128, beta=6.0)
            for q in queries
        )
        assert agree >= 0.95 * len(queries)

    def test_recall_across_reuse_ratios(self, corpus):
        keys, graph, queries = corpus
        n = keys.shape[0]
        for ratio in (1.0, 0.8, 0.6, 0.4, 0.2):
            p = int(ratio * n)
            recalls = []
            for q in queries:
                truth = dipr_bruteforce(q, keys[:p], beta=6.0)
                got = filtered_diprs(graph, q, PrefixPredicate(p), l0=128, beta=6.0)
                recalls.append(len(got & truth) / len(truth))
            assert np.mean(recalls) >= 0.85, f"ratio {ratio}"

    def test_unconditional_two_hop_mode(self, corpus):
        keys, graph, queries = corpus
        pred = PrefixPredicate(600)
        for q in queries[:10]:
            got = filtered_diprs(graph, q, pred, l0=64, beta=6.0, always_two_hop=True)
            assert all(t < 600 for t in got)

    def test_prefix_beyond_context_error(self, corpus):
        keys, graph, queries = corpus
        with pytest.raises(ValueError):
            filtered_diprs(graph, queries[0], PrefixPredicate(keys.shape[0] + 1),
                           l0=16, beta=1.0)

    def test_start_remap(self, corpus):
        keys, graph, queries = corpus
        n = keys.shape[0]
        full = PrefixPredicate(n)
        assert remap_start(graph, full) == graph.entry_point
        small = PrefixPredicate(10)
        start = remap_start(graph, small)
        assert 0 <= start < 10
