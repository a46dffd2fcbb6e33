"""Binary attention-trace format (.kvtr): read/write, validation, synthetic generation.

A trace holds per-layer, per-head key vectors for a fixed token context plus one
query vector per decoding step.  Everything is little-endian float32 on disk;
in-memory consumers widen to float64 before doing arithmetic.

Layout::

    header   32 bytes: magic b"KVTR" | u32 version | u32 n_layers | u32 n_heads
             | u32 head_dim | u32 n_context | u32 n_steps | u32 flags
    keys     f32 [n_layers][n_heads][n_context][head_dim]   (C order)
    values   f32 [n_layers][n_heads][n_context][head_dim]   (only if flags bit 0)
    queries  f32 [n_steps][n_layers][n_heads][head_dim]
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"KVTR"
VERSION = 1
FLAG_HAS_VALUES = 0x1
_KNOWN_FLAGS = FLAG_HAS_VALUES

_HEADER_STRUCT = struct.Struct("<4s7I")
HEADER_BYTES = _HEADER_STRUCT.size  # 32


class TraceFormatError(ValueError):
    """Raised when trace bytes cannot be parsed at all (not a findings report)."""


@dataclass(frozen=True)
class TraceHeader:
    """Shape record for a trace; doubles as the generation target shape."""

    n_layers: int
    n_heads: int
    head_dim: int
    n_context: int
    n_steps: int
    has_values: bool = False

    def keys_shape(self) -> tuple[int, int, int, int]:
        return (self.n_layers, self.n_heads, self.n_context, self.head_dim)

    def queries_shape(self) -> tuple[int, int, int, int]:
        return (self.n_steps, self.n_layers, self.n_heads, self.head_dim)

    def expected_nbytes(self) -> int:
        """Exact file size implied by this header."""
        per = 4  # float32
        keys = self.n_layers * self.n_heads * self.n_context * self.head_dim * per
        queries = self.n_steps * self.n_layers * self.n_heads * self.head_dim * per
        values = keys if self.has_values else 0
        return HEADER_BYTES + keys + values + queries


@dataclass
class AttentionTrace:
    header: TraceHeader
    keys: np.ndarray  # float32, [L, H, N, D]
    queries: np.ndarray  # float32, [S, L, H, D]
    values: np.ndarray | None = None  # float32, [L, H, N, D]


@dataclass(frozen=True)
class DesertProfile:
    """Controls the planted low-score / high-score structure of a synthetic trace.

    ``desert_rate`` is the fraction of token positions that belong to low-score
    ("desert") regions; the remaining ceil((1 - desert_rate) * N) tokens are
    planted inside ``n_hot_regions`` contiguous runs whose dot products with
    every step's query exceed every desert token's by more than ``score_gap``.
    ``per_layer_density`` optionally overrides the hot fraction per layer.
    """

    desert_rate: float = 0.7
    n_hot_regions: int = 3
    score_gap: float = 1.0
    seed: int = 0
    per_layer_density: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.desert_rate <= 1.0:
            raise ValueError(f"desert_rate must be in [0, 1], got {self.desert_rate}")
        if self.n_hot_regions < 1:
            raise ValueError("n_hot_regions must be >= 1")
        if not self.score_gap > 0.0:
            raise ValueError("score_gap must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.per_layer_density is not None:
            for rho in self.per_layer_density:
                if not 0.0 <= rho <= 1.0:
                    raise ValueError("per_layer_density entries must be in [0, 1]")


# -- I/O ---------------------------------------------------------------------


def write_trace(trace: AttentionTrace, path: str | Path) -> int:
    """Serialize to the binary layout above.  Returns bytes written."""
    h = trace.header
    flags = FLAG_HAS_VALUES if h.has_values else 0
    header = _HEADER_STRUCT.pack(
        MAGIC, VERSION, h.n_layers, h.n_heads, h.head_dim, h.n_context, h.n_steps, flags
    )
    keys = np.ascontiguousarray(trace.keys, dtype="<f4")
    queries = np.ascontiguousarray(trace.queries, dtype="<f4")
    if keys.shape != h.keys_shape():
        raise TraceFormatError(f"keys shape {keys.shape} != header {h.keys_shape()}")
    if queries.shape != h.queries_shape():
        raise TraceFormatError(f"queries shape {queries.shape} != header {h.queries_shape()}")
    blobs = [header, keys.tobytes()]
    if h.has_values:
        if trace.values is None:
            raise TraceFormatError("header declares values but trace.values is None")
        values = np.ascontiguousarray(trace.values, dtype="<f4")
        if values.shape != h.keys_shape():
            raise TraceFormatError(f"values shape {values.shape} != header {h.keys_shape()}")
        blobs.append(values.tobytes())
    blobs.append(queries.tobytes())
    data = b"".join(blobs)
    Path(path).write_bytes(data)
    return len(data)


def _parse_header(data: bytes) -> TraceHeader:
    if len(data) < HEADER_BYTES:
        raise TraceFormatError(f"file too short for header: {len(data)} bytes")
    magic, version, n_layers, n_heads, head_dim, n_context, n_steps, flags = (
        _HEADER_STRUCT.unpack_from(data)
    )
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}")
    if flags & ~_KNOWN_FLAGS:
        raise TraceFormatError(f"unknown flag bits 0x{flags & ~_KNOWN_FLAGS:x}")
    return TraceHeader(
        n_layers=n_layers,
        n_heads=n_heads,
        head_dim=head_dim,
        n_context=n_context,
        n_steps=n_steps,
        has_values=bool(flags & FLAG_HAS_VALUES),
    )


def read_trace(path: str | Path) -> AttentionTrace:
    """Parse a .kvtr file.  Raises TraceFormatError on structural problems."""
    data = Path(path).read_bytes()
    h = _parse_header(data)
    if len(data) != h.expected_nbytes():
        raise TraceFormatError(
            f"file size {len(data)} != expected {h.expected_nbytes()} for header {h}"
        )
    per = 4
    n_key = h.n_layers * h.n_heads * h.n_context * h.head_dim
    n_query = h.n_steps * h.n_layers * h.n_heads * h.head_dim
    off = HEADER_BYTES
    keys = np.frombuffer(data, dtype="<f4", count=n_key, offset=off).reshape(h.keys_shape())
    off += n_key * per
    values = None
    if h.has_values:
        values = np.frombuffer(data, dtype="<f4", count=n_key, offset=off).reshape(h.keys_shape())
        off += n_key * per
    queries = np.frombuffer(data, dtype="<f4", count=n_query, offset=off).reshape(
        h.queries_shape()
    )
    return AttentionTrace(header=h, keys=keys, queries=queries, values=values)


# -- validation --------------------------------------------------------------


def validate_trace(path: str | Path) -> list[str]:
    """Check a trace file; returns a list of findings (empty means clean)."""
    findings: list[str] = []
    p = Path(path)
    if not p.is_file():
        return [f"{p}: not a file"]
    data = p.read_bytes()
    try:
        h = _parse_header(data)
    except TraceFormatError as exc:
        return [f"header: {exc}"]
    for name in ("n_layers", "n_heads", "head_dim", "n_context", "n_steps"):
        if getattr(h, name) < 1:
            findings.append(f"header.{name}: must be >= 1, got {getattr(h, name)}")
    if findings:
        return findings
    if len(data) != h.expected_nbytes():
        findings.append(f"size: file is {len(data)} bytes, header implies {h.expected_nbytes()}")
        return findings
    trace = read_trace(p)
    for name, arr in (("keys", trace.keys), ("values", trace.values), ("queries", trace.queries)):
        if arr is None:
            continue
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            findings.append(f"{name}: {int(bad.sum())} non-finite element(s), first at {idx}")
    return findings


# -- synthetic generation ----------------------------------------------------

_DESERT_AMP = 0.25  # desert dot-product amplitudes fall in [-_DESERT_AMP, _DESERT_AMP]
_HOT_SPAN = 0.5
_PLANT_MARGIN = 0.02  # float32 storage headroom on top of score_gap


def _split_region_sizes(n_hot: int, n_regions: int) -> list[int]:
    base, extra = divmod(n_hot, n_regions)
    return [base + (1 if i < extra else 0) for i in range(n_regions)]


def _place_regions(rng: np.random.Generator, n: int, sizes: list[int]) -> list[tuple[int, int]]:
    """Choose non-overlapping contiguous runs, separated by at least one token."""
    r = len(sizes)
    slack = n - sum(sizes) - (r - 1)
    # distribute leftover desert tokens over the r+1 gaps (before/between/after)
    gaps = rng.multinomial(slack, [1.0 / (r + 1)] * (r + 1)) if slack > 0 else [0] * (r + 1)
    regions = []
    pos = int(gaps[0])
    for i, size in enumerate(sizes):
        regions.append((pos, pos + size))
        pos += size
        if i < r - 1:
            pos += 1 + int(gaps[i + 1])
    return regions


def hot_region_map(profile: DesertProfile, header: TraceHeader) -> dict[tuple[int, int], list[tuple[int, int]]]:
    """Planted hot regions per (layer, head), recomputed from the profile alone."""
    out = {}
    for layer in range(header.n_layers):
        for head in range(header.n_heads):
            rng = _lane_rng(profile.seed, layer, head)
            regions, _ = _plan_lane(rng, profile, header, layer)
            out[(layer, head)] = regions
    return out


def _lane_rng(seed: int, layer: int, head: int) -> np.random.Generator:
    return np.random.default_rng([seed, layer, head])


def _plan_lane(rng, profile: DesertProfile, header: TraceHeader, layer: int):
    n = header.n_context
    if profile.per_layer_density is not None:
        hot_frac = profile.per_layer_density[layer % len(profile.per_layer_density)]
    else:
        hot_frac = 1.0 - profile.desert_rate
    n_hot = math.ceil(hot_frac * n)
    if n_hot == 0:
        return [], 0
    n_regions = min(profile.n_hot_regions, n_hot, n - n_hot + 1)
    sizes = _split_region_sizes(n_hot, n_regions)
    return _place_regions(rng, n, sizes), n_hot


def generate_synthetic(profile: DesertProfile, header: TraceHeader) -> AttentionTrace:
    """Deterministically generate a trace with planted hot regions.

    Construction, per (layer, head): draw a random unit direction u.  Every
    step's query is a positive multiple of u, and every key is a*u plus noise
    orthogonal to u, so a token's score is (up to float32 rounding) its planted
    amplitude a times the step gain.  Desert amplitudes sit in
    [-0.25, 0.25]; hot amplitudes start score_gap (plus a small float32 margin)
    above the desert ceiling.  Identical (profile, header) inputs produce
    byte-identical traces.
    """
    n, d = header.n_context, header.head_dim
    keys = np.empty(header.keys_shape(), dtype=np.float32)
    queries = np.empty(header.queries_shape(), dtype=np.float32)
    values = np.empty(header.keys_shape(), dtype=np.float32) if header.has_values else None

    hot_base = _DESERT_AMP + profile.score_gap + _PLANT_MARGIN
    noise_scale = 0.05 / math.sqrt(d)

    for layer in range(header.n_layers):
        for head in range(header.n_heads):
            rng = _lane_rng(profile.seed, layer, head)
            regions, n_hot = _plan_lane(rng, profile, header, layer)

            u = rng.normal(size=d)
            u /= np.linalg.norm(u)

            amps = rng.uniform(-_DESERT_AMP, _DESERT_AMP, size=n)
            if n_hot:
                hot_amps = hot_base + rng.uniform(0.0, _HOT_SPAN, size=n_hot)
                i = 0
                for start, end in regions:
                    amps[start:end] = hot_amps[i : i + (end - start)]
                    i += end - start

            noise = rng.normal(scale=noise_scale, size=(n, d))
            noise -= np.outer(noise @ u, u)  # orthogonal to u: does not move scores
            keys[layer, head] = (amps[:, None] * u[None, :] + noise).astype(np.float32)

            gains = rng.uniform(1.0, 2.0, size=header.n_steps)
            queries[:, layer, head, :] = (gains[:, None] * u[None, :]).astype(np.float32)

            if values is not None:
                values[layer, head] = rng.normal(size=(n, d)).astype(np.float32)

    return AttentionTrace(header=header, keys=keys, queries=queries, values=values)
