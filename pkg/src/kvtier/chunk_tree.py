"""Adaptive chunk partitions: sizing model, exact branch-and-bound top-k, desert merging.

A partition is an ordered list of leaf chunks tiling [0, n_pad), where n_pad is
the token count rounded up to a power of two; trailing sentinel positions are
"pad" leaves that never participate in selection.  Selection works on chunk
score bounds (see kvtier.importance) in logit space: a max-priority queue keyed
by upper bound either confirms a popped chunk's tokens, splits it, or — for
chunks whose keys live only on the cold tier — fetches it first.  The result is
exactly the brute-force top-k token set, ties broken by lower token index.
Partitions persist across decoding steps: confirmed tokens stay as fine leaves,
and adjacent unimportant leaves are coalesced by merge_desert.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from kvtier.importance import (
    ChunkAbstract,
    bound_chunk,
    bound_chunks_batch,
    make_abstract,
    merge_abstracts,
)

# -- chunk-count cost model ----------------------------------------------------


def next_pow2(n: int) -> int:
    if n < 1:
        raise ValueError("n must be >= 1")
    return 1 << (n - 1).bit_length()


def chunk_cost(m: int, n: int, rho: float) -> float:
    """Expected evaluation count A(m) for an initial partition of m chunks.

    With importance density rho, each split level roughly doubles the live
    chunk count scaled by rho, over L = max(1, log2(n/m)) levels:
    A(m) = m * sum_{i=0}^{L-1} (2*rho)^i.
    """
    _check_rho(rho)
    if m < 1 or n < 1 or n % m != 0:
        raise ValueError(f"m={m} must divide n={n}")
    levels = max(1, int(math.log2(n // m)))
    r = 2.0 * rho
    if r == 1.0:
        return float(m * levels)
    return m * (1.0 - r**levels) / (1.0 - r)


def _check_rho(rho: float) -> None:
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must be in [0, 1), got {rho}")


def plan_chunk_count(
    n: int, rho: float, *, min_chunk_size: int = 8, max_chunk_size: int = 64
) -> int:
    """Pick the chunk count minimizing A(m) over power-of-two m, then clamp.

    The argmin ties break toward fewer chunks.  The implied chunk size n/m is
    clamped into [min_chunk_size, max_chunk_size] (and never above n itself).
    """
    _check_rho(rho)
    if min_chunk_size > max_chunk_size:
        raise ValueError("min_chunk_size must be <= max_chunk_size")
    n_eff = next_pow2(n)
    best_m, best_cost = 1, math.inf
    m = 1
    while m <= n_eff:
        cost = chunk_cost(m, n_eff, rho)
        if cost < best_cost - 1e-12:
            best_m, best_cost = m, cost
        m *= 2
    size = n_eff // best_m
    size = min(max(size, min_chunk_size), max_chunk_size, n_eff)
    return n_eff // size


@dataclass
class ChunkPlanConfig:
    """Partition sizing policy, including the early-layer/early-step regime."""

    default_chunk_size: int = 64
    early_chunk_size: int = 8
    early_layers: int = 2
    early_steps_fraction: float = 0.075
    rho: tuple[float, ...] | None = None  # optional per-layer importance density profile

    def __post_init__(self):
        for name in ("default_chunk_size", "early_chunk_size"):
            v = getattr(self, name)
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name} must be a positive power of two, got {v}")
        if self.early_chunk_size > self.default_chunk_size:
            raise ValueError("early_chunk_size must be <= default_chunk_size")
        if self.early_layers < 0:
            raise ValueError("early_layers must be >= 0")
        if not 0.0 <= self.early_steps_fraction <= 1.0:
            raise ValueError("early_steps_fraction must be in [0, 1]")

    def early_step_count(self, n_steps: int) -> int:
        return math.ceil(self.early_steps_fraction * n_steps)

    def chunk_size_for(self, layer: int, step: int, n_steps: int, n_context: int) -> int:
        if layer < self.early_layers or step < self.early_step_count(n_steps):
            return min(self.early_chunk_size, next_pow2(n_context))
        if self.rho is not None:
            rho = self.rho[layer % len(self.rho)]
            m = plan_chunk_count(
                n_context,
                rho,
                min_chunk_size=self.early_chunk_size,
                max_chunk_size=self.default_chunk_size,
            )
            return next_pow2(n_context) // m
        return min(self.default_chunk_size, next_pow2(n_context))


# -- partition structure ---------------------------------------------------------

CANDIDATE = "candidate"
IMPORTANT = "important"
DESERT = "desert"
PAD = "pad"


@dataclass
class ChunkNode:
    start: int
    end: int
    abstract: ChunkAbstract | None = None
    upper: float = math.nan
    lower: float = math.nan
    state: str = CANDIDATE
    residency: str = "warm"
    abstract_only: bool = False
    children: tuple["ChunkNode", "ChunkNode"] | tuple = ()

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass
class Partition:
    leaves: list[ChunkNode]
    n_real: int
    n_pad: int
    keys: np.ndarray | None = None  # float64 [n_real, d]

    def real_leaves(self) -> list[ChunkNode]:
        return [c for c in self.leaves if c.state != PAD]

    def leaf_spans(self) -> list[tuple[int, int, str]]:
        return [(c.start, c.end, c.state) for c in self.leaves]


class ChunkSource(Protocol):
    """Cold-tier hook: make keys for [start, end) resident and return them."""

    def fetch(self, start: int, end: int) -> np.ndarray: ...


def build_partition(
    n: int,
    m: int,
    keys: np.ndarray | None = None,
    abstracts: list[ChunkAbstract] | None = None,
) -> Partition:
    """m uniform leaves tiling [0, next_pow2(n)); trailing sentinels become pads.

    Either resident keys (abstracts derived here) or precomputed abstracts for
    cold chunks (leaves start abstract-only) must be supplied.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    n_pad = next_pow2(n)
    if m < 1 or n_pad % m != 0:
        raise ValueError(f"m={m} must be a power-of-two divisor of padded n={n_pad}")
    size = n_pad // m
    if keys is not None:
        keys = np.asarray(keys, dtype=np.float64)
        if keys.shape[0] != n:
            raise ValueError(f"keys rows {keys.shape[0]} != n {n}")
    leaves: list[ChunkNode] = []
    by_start = {a.start: a for a in abstracts or []}
    for start in range(0, n_pad, size):
        end = start + size
        if start >= n:
            leaves.append(ChunkNode(start=start, end=end, state=PAD))
            continue
        if start in by_start and by_start[start].end == min(end, n):
            leaves.append(
                ChunkNode(start=start, end=end, abstract=by_start[start],
                          abstract_only=True, residency="cold")
            )
        elif keys is not None:
            leaves.append(
                ChunkNode(start=start, end=end, abstract=make_abstract(keys, start, min(end, n)))
            )
        else:
            raise ValueError(f"no keys and no abstract covering chunk [{start}, {end})")
    return Partition(leaves=leaves, n_real=n, n_pad=n_pad, keys=keys)


# -- selection --------------------------------------------------------------------


@dataclass
class SelectionResult:
    k: int
    important_tokens: list[int]  # confirmation order
    eval_count: int
    fetch_set: list[tuple[int, int]] = field(default_factory=list)
    desert_chunks: list[tuple[int, int]] = field(default_factory=list)

    @property
    def selected(self) -> set[int]:
        return set(self.important_tokens)


def _real_end(node: ChunkNode, n_real: int) -> int:
    return min(node.end, n_real)


def select_top_k(
    partition: Partition,
    query: np.ndarray,
    k: int,
    store: ChunkSource | None = None,
) -> SelectionResult:
    """Exact top-k tokens by current-query logit, ties broken by lower index.

    Branch and bound on a max-priority queue keyed by chunk upper bound.  A
    popped chunk is (a) confirmed outright when it is a singleton, or when it
    is resident, its lower bound strictly dominates every other pending upper
    bound, and it fits the remaining budget; (b) split in half when resident;
    (c) fetched through ``store`` first when its keys live only on the cold
    tier (on-disk chunks are never split in place).  Chunks never popped before
    the budget fills are marked desert.  eval_count counts every bound/score
    evaluation, including the initial pass over all current leaves.
    """
    n_real = partition.n_real
    if k < 0 or k > n_real:
        raise ValueError(f"k must be in [0, {n_real}], got {k}")
    query = np.asarray(query, dtype=np.float64)

    result = SelectionResult(k=k, important_tokens=[], eval_count=0)
    live = partition.real_leaves()
    for node in live:
        node.state = CANDIDATE

    if live:
        uppers, lowers = bound_chunks_batch(
            query,
            np.stack([c.abstract.max_key for c in live]),
            np.stack([c.abstract.min_key for c in live]),
        )
        result.eval_count += len(live)
        for node, ub, lb in zip(live, uppers, lowers):
            node.upper, node.lower = float(ub), float(lb)

    heap: list[tuple[float, int, ChunkNode]] = [(-c.upper, c.start, c) for c in live]
    heapq.heapify(heap)
    alive: dict[int, ChunkNode] = {id(c): c for c in partition.leaves}

    def fetch(node: ChunkNode) -> None:
        if store is None:
            raise RuntimeError(f"chunk [{node.start},{node.end}) is cold but no store was given")
        block = store.fetch(node.start, _real_end(node, n_real))
        if partition.keys is None:
            raise RuntimeError("partition has no key storage to fetch into")
        partition.keys[node.start : _real_end(node, n_real)] = block
        node.abstract_only = False
        node.residency = "warm"
        result.fetch_set.append((node.start, _real_end(node, n_real)))

    while len(result.important_tokens) < k and heap:
        _, _, node = heapq.heappop(heap)
        real_end = _real_end(node, n_real)
        real_size = real_end - node.start
        budget = k - len(result.important_tokens)

        if real_size == 1:
            if node.abstract_only:
                fetch(node)  # KV payload is needed downstream even though the bound was exact
            node.state = IMPORTANT
            result.important_tokens.append(node.start)
            continue

        next_upper = -heap[0][0] if heap else -math.inf
        # strict dominance: ">=" could confirm a chunk past an equal-scoring,
        # lower-index token outside it, breaking the tie-break contract
        if not node.abstract_only and node.lower > next_upper and real_size <= budget:
            node.state = IMPORTANT
            result.important_tokens.extend(range(node.start, real_end))
            continue

        if node.abstract_only:
            fetch(node)

        mid = node.start + node.size // 2
        children = []
        for lo, hi in ((node.start, mid), (mid, node.end)):
            if lo >= n_real:
                children.append(ChunkNode(start=lo, end=hi, state=PAD))
                continue
            child = ChunkNode(
                start=lo,
                end=hi,
                abstract=make_abstract(partition.keys, lo, min(hi, n_real)),
                residency=node.residency,
            )
            ub, lb = bound_chunk(query, child.abstract)
            child.upper, child.lower = ub, lb
            result.eval_count += 1
            children.append(child)
            heapq.heappush(heap, (-child.upper, child.start, child))
        node.children = tuple(children)
        del alive[id(node)]
        for child in children:
            alive[id(child)] = child

    for _, _, node in heap:
        node.state = DESERT

    partition.leaves = sorted(alive.values(), key=lambda c: c.start)
    result.desert_chunks = [
        (c.start, _real_end(c, n_real)) for c in partition.leaves if c.state == DESERT
    ]
    return result


# -- desert merging ----------------------------------------------------------------


def merge_desert(partition: Partition) -> int:
    """Coalesce adjacent desert leaves (and adjacent pad leaves); returns merges done.

    Merged chunks recompute their abstract from the children's extrema, so a
    merged cold run stays summarizable without touching its keys.
    """
    merged: list[ChunkNode] = []
    count = 0
    for node in partition.leaves:
        prev = merged[-1] if merged else None
        if (
            prev is not None
            and node.state == prev.state
            and prev.state in (DESERT, PAD)
            and prev.end == node.start
        ):
            fused = ChunkNode(
                start=prev.start,
                end=node.end,
                abstract=(
                    merge_abstracts(prev.abstract, node.abstract)
                    if prev.state == DESERT
                    else None
                ),
                upper=math.nan,
                lower=math.nan,
                state=prev.state,
                residency="cold" if "cold" in (prev.residency, node.residency) else prev.residency,
                abstract_only=prev.abstract_only or node.abstract_only,
            )
            merged[-1] = fused
            count += 1
        else:
            merged.append(node)
    partition.leaves = merged
    return count


def dump_partition(partition: Partition) -> str:
    """Diagnostic dump: one leaf per line, 'start end state upper lower residency'."""
    lines = []
    for c in partition.leaves:
        lines.append(f"{c.start} {c.end} {c.state} {c.upper:.9g} {c.lower:.9g} {c.residency}")
    return "\n".join(lines) + ("\n" if lines else "")
