"""Seeded synthetic decode workloads for the benchmark harness.

Real model traces need weights and GPUs; these generators stand in with
distributions that reproduce the phenomena the engine cares about: clustered
key spaces, in-distribution vs. shifted (out-of-distribution) queries, and
per-head differences in how peaked the score distribution is. Everything is
derived from one 64-bit seed, so workloads replay exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ModelShape

GAUSSIAN_CLUSTERS = "gaussian-clusters"
UNIFORM_SPHERE = "uniform-sphere"

IN_DISTRIBUTION = "in-distribution"
SHIFTED = "shifted"

VOCAB = 50_000


UNIFORM_SIZES = "uniform"
GEOMETRIC_SIZES = "geometric"


@dataclass(frozen=True)
class WorkloadSpec:
    """Fully seeded description of one synthetic workload.

    ``cluster_sizes="geometric"`` makes cluster populations span orders of
    magnitude, so the critical-set size varies per query (the heterogeneity
    that separates an adaptive range query from a fixed top-k).
    """

    n_tokens: int
    shape: ModelShape
    distribution: str = GAUSSIAN_CLUSTERS
    clusters: int = 16
    spread: float = 0.25
    cluster_sizes: str = UNIFORM_SIZES
    query_mode: str = IN_DISTRIBUTION
    shift: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.distribution not in (GAUSSIAN_CLUSTERS, UNIFORM_SPHERE):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.cluster_sizes not in (UNIFORM_SIZES, GEOMETRIC_SIZES):
            raise ValueError(f"unknown cluster sizing {self.cluster_sizes!r}")
        if self.query_mode not in (IN_DISTRIBUTION, SHIFTED):
            raise ValueError(f"unknown query mode {self.query_mode!r}")
        if self.n_tokens < 1:
            raise ValueError("n_tokens must be positive")

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, stream]))


@dataclass
class SyntheticContext:
    token_ids: np.ndarray
    keys: np.ndarray  # (layers, kv heads, tokens, dim)
    values: np.ndarray
    centers: np.ndarray | None = None
    assignments: np.ndarray | None = None


def _cluster_centers(rng: np.random.Generator, clusters: int, dim: int) -> np.ndarray:
    centers = rng.standard_normal((clusters, dim))
    return centers / np.linalg.norm(centers, axis=1, keepdims=True) * np.sqrt(dim)


def cluster_populations(spec: WorkloadSpec) -> np.ndarray:
    """Tokens per cluster; geometric sizing spans roughly two decades."""
    c = spec.clusters
    if spec.cluster_sizes == UNIFORM_SIZES:
        sizes = np.full(c, spec.n_tokens // c, dtype=np.int64)
    else:
        raw = np.geomspace(1.0, 100.0, c)
        sizes = np.maximum(1, np.floor(raw / raw.sum() * spec.n_tokens)).astype(np.int64)
    sizes[0] += spec.n_tokens - sizes.sum()
    return sizes


def _sample_keys(
    rng: np.random.Generator, spec: WorkloadSpec, n: int, dim: int,
    centers: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray | None]:
    if spec.distribution == UNIFORM_SPHERE:
        x = rng.standard_normal((n, dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        return (x * np.sqrt(dim)).astype(np.float32), None
    if spec.cluster_sizes == GEOMETRIC_SIZES:
        sizes = cluster_populations(spec)
        assignments = rng.permutation(np.repeat(np.arange(centers.shape[0]), sizes))
    else:
        assignments = rng.integers(0, centers.shape[0], size=n)
    keys = centers[assignments] + spec.spread * rng.standard_normal((n, dim))
    return keys.astype(np.float32), assignments


def make_context(spec: WorkloadSpec) -> SyntheticContext:
    """One seeded context: token ids plus per-(layer, kv head) K and V."""
    shape = spec.shape
    rng = spec.rng(stream=1)
    token_ids = rng.integers(0, VOCAB, size=spec.n_tokens, dtype=np.int64)
    centers = (
        _cluster_centers(rng, spec.clusters, shape.dim)
        if spec.distribution == GAUSSIAN_CLUSTERS
        else None
    )
    keys = np.empty(
        (shape.n_layers, shape.n_kv_heads, spec.n_tokens, shape.dim), dtype=np.float32
    )
    values = np.empty_like(keys)
    assignments = None
    for layer in range(shape.n_layers):
        for head in range(shape.n_kv_heads):
            k, a = _sample_keys(rng, spec, spec.n_tokens, shape.dim, centers)
            keys[layer, head] = k
            values[layer, head] = rng.standard_normal(
                (spec.n_tokens, shape.dim)
            ).astype(np.float32)
            if layer == 0 and head == 0:
                assignments = a
    return SyntheticContext(
        token_ids=token_ids, keys=keys, values=values,
        centers=centers, assignments=assignments,
    )


def make_queries(
    spec: WorkloadSpec,
    count: int,
    centers: np.ndarray | None,
    stream: int = 2,
    scale: float = 1.0,
    cluster: int | None = None,
) -> np.ndarray:
    """Seeded query vectors matching the workload's query model.

    ``cluster`` pins every query to one cluster center; the default draws the
    target cluster uniformly per query.
    """
    rng = spec.rng(stream=stream)
    dim = spec.shape.dim
    if spec.distribution == GAUSSIAN_CLUSTERS and centers is not None:
        if cluster is None:
            picks = rng.integers(0, centers.shape[0], size=count)
        else:
            picks = np.full(count, cluster % centers.shape[0])
        q = centers[picks] + spec.spread * rng.standard_normal((count, dim))
    else:
        q = rng.standard_normal((count, dim))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        q *= np.sqrt(dim)
    if spec.query_mode == SHIFTED:
        offset = rng.standard_normal(dim)
        offset = offset / np.linalg.norm(offset) * spec.shift * np.sqrt(dim)
        q = q + offset
    return (q * scale).astype(np.float32)


def decode_step_inputs(
    spec: WorkloadSpec, steps: int, centers: np.ndarray | None, stream: int = 4
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-step synthetic decode inputs.

    Returns ``(token_ids, q, k, v)`` with shapes (steps,),
    (steps, layers, query heads, dim), (steps, layers, kv heads, dim) and the
    same for values.
    """
    shape = spec.shape
    rng = spec.rng(stream=stream)
    token_ids = rng.integers(0, VOCAB, size=steps, dtype=np.int64)
    dim = shape.dim
    if spec.distribution == GAUSSIAN_CLUSTERS and centers is not None:
        picks = rng.integers(0, centers.shape[0], size=(steps, shape.n_layers, shape.n_query_heads))
        q = centers[picks] + spec.spread * rng.standard_normal(
            (steps, shape.n_layers, shape.n_query_heads, dim)
        )
        kpicks = rng.integers(0, centers.shape[0], size=(steps, shape.n_layers, shape.n_kv_heads))
        k = centers[kpicks] + spec.spread * rng.standard_normal(
            (steps, shape.n_layers, shape.n_kv_heads, dim)
        )
    else:
        q = rng.standard_normal((steps, shape.n_layers, shape.n_query_heads, dim))
        k = rng.standard_normal((steps, shape.n_layers, shape.n_kv_heads, dim))
    v = rng.standard_normal((steps, shape.n_layers, shape.n_kv_heads, dim))
    return token_ids, q.astype(np.float32), k.astype(np.float32), v.astype(np.float32)
