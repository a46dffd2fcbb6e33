"""Token importance scoring and query-aware chunk score bounds.

Scores live in logit space: score(q, k) = (q . k) / sqrt(d).  The "softmax"
mode normalizes a logit vector over the supplied token set.  A chunk is
summarized by the element-wise max and min of its keys; for any query, a sound
upper/lower bound on the chunk's token logits follows from picking, per
dimension, whichever extreme the query sign favours.  Bounds collapse to the
exact logit on single-token chunks.

Selection compares bounds in logit space; softmax is a monotone map of the
logit (fixed denominator), so the induced ordering is identical.  When asked
for softmax-mode bounds we return the exp of the logit bounds (the unnormalized
softmax numerator), which preserves soundness and ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np

Mode = Literal["logit", "softmax"]


def attention_logits(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """(q . k_i) / sqrt(d) for each key row, in float64."""
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if k.ndim != 2 or q.ndim != 1 or k.shape[1] != q.shape[0]:
        raise ValueError(f"shape mismatch: keys {k.shape} vs query {q.shape}")
    return k @ q / math.sqrt(q.shape[0])


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax; sums to 1 over the given index set."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        return np.zeros_like(x)
    shifted = x - x.max()
    e = np.exp(shifted)
    return e / e.sum()


def score_tokens(query: np.ndarray, keys: np.ndarray, mode: Mode = "logit") -> np.ndarray:
    """Per-token importance scores, indexed by token position."""
    logits = attention_logits(query, keys)
    if mode == "logit":
        return logits
    if mode == "softmax":
        return softmax(logits)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class ChunkAbstract:
    """Element-wise key extrema of a contiguous token range [start, end)."""

    start: int
    end: int
    max_key: np.ndarray  # float64 [d]
    min_key: np.ndarray  # float64 [d]

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError(f"empty chunk [{self.start}, {self.end})")
        if not np.all(self.max_key >= self.min_key):
            raise ValueError("max_key must dominate min_key element-wise")

    @property
    def n_tokens(self) -> int:
        return self.end - self.start

    def nbytes(self) -> int:
        """On-wire size: two float32 key vectors."""
        return 2 * self.max_key.shape[0] * 4


def make_abstract(keys: np.ndarray, start: int = 0, end: int | None = None) -> ChunkAbstract:
    """Summarize keys[start:end) by element-wise extrema."""
    k = np.asarray(keys, dtype=np.float64)
    end = k.shape[0] if end is None else end
    block = k[start:end]
    if block.shape[0] == 0:
        raise ValueError(f"empty chunk [{start}, {end})")
    return ChunkAbstract(start=start, end=end, max_key=block.max(axis=0), min_key=block.min(axis=0))


def merge_abstracts(a: ChunkAbstract, b: ChunkAbstract) -> ChunkAbstract:
    """Extrema of two adjacent chunks; the union stays a sound summary."""
    lo, hi = (a, b) if a.start <= b.start else (b, a)
    if lo.end != hi.start:
        raise ValueError(f"chunks [{lo.start},{lo.end}) and [{hi.start},{hi.end}) not adjacent")
    return ChunkAbstract(
        start=lo.start,
        end=hi.end,
        max_key=np.maximum(a.max_key, b.max_key),
        min_key=np.minimum(a.min_key, b.min_key),
    )


class ChunkBounds(NamedTuple):
    upper: float
    lower: float


def bound_chunk(query: np.ndarray, abstract: ChunkAbstract, mode: Mode = "logit") -> ChunkBounds:
    """Sound [lower, upper] bounds on the chunk's token scores for this query.

    Per dimension i the candidate products are q_i * max_key_i and
    q_i * min_key_i; the larger bounds any token's contribution from above, the
    smaller from below.  Exact (upper == lower == logit) on singletons.
    """
    q = np.asarray(query, dtype=np.float64)
    d = q.shape[0]
    a = q * abstract.max_key
    b = q * abstract.min_key
    scale = math.sqrt(d)
    upper = float(np.maximum(a, b).sum() / scale)
    lower = float(np.minimum(a, b).sum() / scale)
    if mode == "softmax":
        return ChunkBounds(upper=math.exp(upper), lower=math.exp(lower))
    if mode != "logit":
        raise ValueError(f"unknown mode {mode!r}")
    return ChunkBounds(upper=upper, lower=lower)


def bound_chunks_batch(
    query: np.ndarray, max_keys: np.ndarray, min_keys: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Logit-space bounds for many chunks at once (rows of extrema)."""
    q = np.asarray(query, dtype=np.float64)
    a = max_keys * q[None, :]
    b = min_keys * q[None, :]
    scale = math.sqrt(q.shape[0])
    return np.maximum(a, b).sum(axis=1) / scale, np.minimum(a, b).sum(axis=1) / scale
