"""Shared domain types and the inner-product math every other module builds on.

Vectors are 1-D float32 numpy arrays validated at construction (finite, fixed
dimension). All score arithmetic widens to float64 before accumulating, which
keeps results deterministic for a given BLAS build and well within the 1e-6
relative tolerance contract against a sequential reference sum.

Token ids are plain 0-based ints: token ``t`` is position ``t`` within one
context sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32

TokenId = int


def as_vector(data) -> np.ndarray:
    """Validate and return a float32 vector.

    Accepts any 1-D sequence of reals. Rejects empty input and any
    non-finite element (NaN/Inf).
    """
    v = np.asarray(data, dtype=DTYPE)
    if v.ndim != 1:
        raise ValueError(f"vector must be 1-D, got shape {v.shape}")
    if v.size == 0:
        raise ValueError("vector must have at least one element")
    if not np.isfinite(v).all():
        raise ValueError("vector contains non-finite elements")
    return v


def as_matrix(data) -> np.ndarray:
    """Validate and return an (n, d) float32 key/value matrix."""
    m = np.asarray(data, dtype=DTYPE)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {m.shape}")
    if m.shape[1] == 0:
        raise ValueError("matrix must have at least one column")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains non-finite elements")
    return m


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def inner_product(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product of two vectors, accumulated in float64."""
    _check_dims(a, b)
    return float(np.dot(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False)))


def inner_products(keys: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Inner products of every row of ``keys`` with ``q``, as a float64 array."""
    _check_dims(keys, q)
    return keys.astype(np.float64, copy=False) @ q.astype(np.float64, copy=False)


def scaled_score(q: np.ndarray, k: np.ndarray) -> float:
    """Attention logit: inner product scaled by 1/sqrt(d)."""
    return inner_product(q, k) / np.sqrt(q.shape[-1])


def scaled_scores(keys: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Attention logits for every row of ``keys`` against ``q`` (float64)."""
    return inner_products(keys, q) / np.sqrt(q.shape[-1])


@dataclass(frozen=True)
class ModelShape:
    """Static shape of the attention stack the engine serves.

    ``n_query_heads`` must be an exact multiple of ``n_kv_heads``; the ratio
    is the grouped-query group size (query heads per shared kv head).
    """

    n_layers: int
    n_query_heads: int
    n_kv_heads: int
    dim: int

    def __post_init__(self) -> None:
        if self.n_layers < 1 or self.n_query_heads < 1 or self.n_kv_heads < 1:
            raise ValueError("all head/layer counts must be positive")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.n_query_heads % self.n_kv_heads != 0:
            raise ValueError(
                f"n_query_heads ({self.n_query_heads}) must be a multiple of "
                f"n_kv_heads ({self.n_kv_heads})"
            )

    @property
    def group_size(self) -> int:
        return self.n_query_heads // self.n_kv_heads

    def kv_head_of(self, query_head: int) -> int:
        """Kv head serving the given query head."""
        if not 0 <= query_head < self.n_query_heads:
            raise ValueError(f"query head {query_head} out of range")
        return query_head // self.group_size

    def query_heads_of(self, kv_head: int) -> range:
        """Query heads in the group served by ``kv_head``."""
        if not 0 <= kv_head < self.n_kv_heads:
            raise ValueError(f"kv head {kv_head} out of range")
        g = self.group_size
        return range(kv_head * g, (kv_head + 1) * g)


@dataclass(frozen=True)
class HeadAddress:
    """Position of one attention head: (layer, kv head, query head)."""

    layer: int
    kv_head: int
    query_head: int

    def validate(self, shape: ModelShape) -> None:
        if not 0 <= self.layer < shape.n_layers:
            raise ValueError(f"layer {self.layer} out of range")
        if not 0 <= self.kv_head < shape.n_kv_heads:
            raise ValueError(f"kv head {self.kv_head} out of range")
        if not 0 <= self.query_head < shape.n_query_heads:
            raise ValueError(f"query head {self.query_head} out of range")
        if shape.kv_head_of(self.query_head) != self.kv_head:
            raise ValueError(
                f"query head {self.query_head} is not in kv head {self.kv_head}'s group"
            )


@dataclass(frozen=True)
class WindowConfig:
    """Token window always retained for attention.

    ``initial`` leading tokens and ``last`` most recent tokens are included in
    every sparse selection regardless of what retrieval returns. When
    ``initial + last`` covers a context, the window is the whole context.
    """

    initial: int = 16
    last: int = 64

    def __post_init__(self) -> None:
        if self.initial < 0 or self.last < 0:
            raise ValueError("window sizes must be non-negative")

    def base_ids(self, prefix_len: int) -> np.ndarray:
        """Window token ids within a base prefix of the given length (sorted)."""
        if prefix_len <= self.initial + self.last:
            return np.arange(prefix_len, dtype=np.int64)
        head = np.arange(self.initial, dtype=np.int64)
        tail = np.arange(prefix_len - self.last, prefix_len, dtype=np.int64)
        return np.concatenate([head, tail])
