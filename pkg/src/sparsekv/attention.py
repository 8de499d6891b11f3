"""Attention kernels: exact full attention, sparse attention over a selected
token subset, and mergeable partial-attention state.

All kernels are single-head and selection-agnostic; multi-head orchestration
and window handling live in :mod:`sparsekv.store`. Softmax uses
max-subtraction; exp underflow to zero is accepted. Internals run in float64,
outputs are float32.

:class:`PartialAttention` is the running (max, normalizer, weighted-sum)
triple that lets attention over disjoint token groups be computed where each
group resides and combined afterwards: for any partition of a token set,
absorbing each part, merging, and finalizing matches the single-pass result
within 1e-5 absolute.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DTYPE, scaled_score, scaled_scores


def full_attention(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Exact softmax attention of ``q`` over all keys/values.

    ``keys`` and ``values`` are (n, d) matrices of equal, nonzero length.
    Returns the float32 output vector.
    """
    keys = np.atleast_2d(keys)
    values = np.atleast_2d(values)
    if keys.shape[0] == 0:
        raise ValueError("attention over an empty key set is undefined")
    if keys.shape[0] != values.shape[0]:
        raise ValueError(f"keys/values length mismatch: {keys.shape[0]} vs {values.shape[0]}")
    z = scaled_scores(keys, q)
    w = np.exp(z - z.max())
    o = (w @ values.astype(np.float64, copy=False)) / w.sum()
    if not np.isfinite(o).all():
        raise FloatingPointError("attention output is non-finite")
    return o.astype(DTYPE)


def sparse_attention(
    q: np.ndarray, selected: list[tuple[int, np.ndarray, np.ndarray]]
) -> np.ndarray:
    """Attention restricted to an explicit token selection.

    ``selected`` is a nonempty list of ``(token_id, key, value)`` triples with
    no duplicate token id; the softmax is renormalized over the subset.
    """
    if not selected:
        raise ValueError("sparse attention requires a nonempty selection")
    ids = [t for t, _, _ in selected]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate token id in selection")
    keys = np.stack([k for _, k, _ in selected])
    values = np.stack([v for _, _, v in selected])
    return full_attention(q, keys, values)


def recovery_ratio(q: np.ndarray, all_keys: np.ndarray, selected: set[int]) -> float:
    """Fraction of total attention mass captured by ``selected``.

    Softmax weights are computed over *all* keys; the ratio is the weight sum
    of the selected token ids. Empty selection yields 0.
    """
    if not selected:
        return 0.0
    n = all_keys.shape[0]
    idx = np.fromiter(selected, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError("selected token id out of range")
    z = scaled_scores(all_keys, q)
    w = np.exp(z - z.max())
    return float(w[idx].sum() / w.sum())


@dataclass
class PartialAttention:
    """Online-softmax state over a subset of tokens.

    Fields are the running maximum ``m`` of scaled scores, the normalizer
    ``l = sum(exp(z - m))`` and the weighted value sum
    ``acc = sum(exp(z - m) * v)``. The empty state (no token absorbed) has
    ``acc is None`` and merges as the identity.
    """

    m: float = -np.inf
    l: float = 0.0
    acc: np.ndarray | None = field(default=None)

    @classmethod
    def empty(cls) -> "PartialAttention":
        return cls()

    @classmethod
    def over(cls, q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> "PartialAttention":
        """Absorb a whole token group in one vectorized pass."""
        keys = np.atleast_2d(keys)
        values = np.atleast_2d(values)
        if keys.shape[0] == 0:
            return cls.empty()
        if keys.shape[0] != values.shape[0]:
            raise ValueError(f"keys/values length mismatch: {keys.shape[0]} vs {values.shape[0]}")
        z = scaled_scores(keys, q)
        m = float(z.max())
        w = np.exp(z - m)
        return cls(m=m, l=float(w.sum()), acc=w @ values.astype(np.float64, copy=False))

    @property
    def is_empty(self) -> bool:
        return self.acc is None

    def absorb(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> "PartialAttention":
        """Return a new state with one more token folded in."""
        z = scaled_score(q, k)
        v64 = v.astype(np.float64, copy=False)
        if self.is_empty:
            return PartialAttention(m=z, l=1.0, acc=v64.copy())
        if z <= self.m:
            w = np.exp(z - self.m)
            return PartialAttention(m=self.m, l=self.l + w, acc=self.acc + w * v64)
        f = np.exp(self.m - z)
        return PartialAttention(m=z, l=self.l * f + 1.0, acc=self.acc * f + v64)

    def merge(self, other: "PartialAttention") -> "PartialAttention":
        """Combine two partials over disjoint token sets."""
        if self.is_empty:
            return other
        if other.is_empty:
            return self
        if self.acc.shape != other.acc.shape:
            raise ValueError("cannot merge partials of different dimension")
        m = max(self.m, other.m)
        f1 = np.exp(self.m - m)
        f2 = np.exp(other.m - m)
        return PartialAttention(
            m=m,
            l=self.l * f1 + other.l * f2,
            acc=self.acc * f1 + other.acc * f2,
        )

    def finalize(self) -> np.ndarray:
        """Normalize into a float32 attention output."""
        if self.is_empty:
            raise ValueError("cannot finalize an empty partial")
        o = self.acc / self.l
        if not np.isfinite(o).all():
            raise FloatingPointError("partial attention finalized to non-finite output")
        return o.astype(DTYPE)
