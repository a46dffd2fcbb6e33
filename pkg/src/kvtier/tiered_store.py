"""Three-level KV residency: hot/warm memory budgets over a file-backed cold tier.

Chunks of a context's key/value cache live in exactly one authoritative tier:

* ``hot``  — accelerator-side budget, where attention actually reads,
* ``warm`` — host-side budget, the staging area for everything in flight,
* ``cold`` — a real directory of per-(layer, head) record files.

Every non-pinned chunk is also written through to its lane's cold file at
placement time, so demoting warm data back to cold is a flag flip that never
performs I/O.  Early layers can be pinned: they never touch the disk (no data
file, no abstract file) and must fit inside hot+warm.

Payload bytes are stored at fp16 width (2 bytes/element, keys + values) for
honest transfer accounting, while all scoring arithmetic elsewhere operates on
the widened float keys; the per-chunk summaries written next to the payload are
extracted from the original float32 keys so score bounds stay sound.

A transfer ledger accumulates one row per (step, layer): bytes moved between
tiers, summary bytes shipped, and the resulting cold-transmission ratio
``r = (abstract_bytes + cold_to_warm) / cold-resident bytes at row open``.
"""

from __future__ import annotations

import csv
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from kvtier.importance import ChunkAbstract
from kvtier.trace import AttentionTrace

HOT = "hot"
WARM = "warm"
COLD = "cold"

_DATA_MAGIC = b"KVCF"
_ABSTRACT_MAGIC = b"KVAB"
_FILE_VERSION = 1
_FILE_HEADER = struct.Struct("<4sIII")  # magic, version, n_records, head_dim
_TABLE_ENTRY = struct.Struct("<IIQ")  # start, end, payload offset

_KV_ELEM_BYTES = 2  # fp16 payload width
_ABSTRACT_ELEM_BYTES = 4  # float32, same width as the trace format


def kv_nbytes(n_tokens: int, head_dim: int) -> int:
    """Bytes of fp16 keys+values for ``n_tokens`` tokens of one (layer, head)."""
    return 2 * n_tokens * head_dim * _KV_ELEM_BYTES


def abstract_nbytes(head_dim: int) -> int:
    """Bytes of one chunk summary: max-key and min-key vectors in float32."""
    return 2 * head_dim * _ABSTRACT_ELEM_BYTES


class CapacityError(RuntimeError):
    """Hot+warm budgets cannot hold what must stay off the cold tier."""


class ResidencyError(RuntimeError):
    """An operation's tier precondition does not hold (e.g. fetch of warm data)."""


class ColdStoreError(RuntimeError):
    """A cold-tier file is missing, truncated, or holds a corrupt record."""


@dataclass(frozen=True)
class TierConfig:
    hot_capacity: int
    warm_capacity: int
    cold_dir: str | Path
    bandwidth_hot_warm: float = 8.0  # bytes per ms between hot and warm
    bandwidth_warm_cold: float = 2.0  # bytes per ms between warm and cold
    early_layers_pinned: int = 2
    hot_frequency_threshold: int = 4  # touches within the window that exempt a token
    frequency_window: int = 16  # sliding window length, in steps

    def __post_init__(self) -> None:
        if self.hot_capacity <= 0 or self.warm_capacity <= 0:
            raise ValueError("tier capacities must be positive")
        if self.bandwidth_hot_warm <= 0 or self.bandwidth_warm_cold <= 0:
            raise ValueError("bandwidths must be positive")
        if self.early_layers_pinned < 0:
            raise ValueError("early_layers_pinned must be >= 0")
        if self.hot_frequency_threshold < 1 or self.frequency_window < 1:
            raise ValueError("frequency threshold and window must be >= 1")


@dataclass
class ChunkRecord:
    """Placement unit: one token span of one (layer, head) lane."""

    layer: int
    head: int
    start: int
    end: int
    nbytes: int
    tier: str
    pinned: bool
    replica_on_cold: bool
    offset: int = 0  # payload offset inside the lane's data file
    access_count: int = 0
    last_touch: int = -1

    @property
    def n_tokens(self) -> int:
        return self.end - self.start


@dataclass
class LedgerRow:
    """Per-(step, layer) transfer counters, summed over heads."""

    step: int
    layer: int
    abstract_bytes: int = 0
    cold_to_warm: int = 0
    warm_to_hot: int = 0
    hot_to_warm: int = 0
    fetch_ops: int = 0
    cold_bytes_at_open: int = 0

    @property
    def r(self) -> float:
        if self.cold_bytes_at_open == 0:
            return 0.0
        return (self.abstract_bytes + self.cold_to_warm) / self.cold_bytes_at_open


LEDGER_COLUMNS = ("step", "layer", "abstract_bytes", "cold_to_warm", "warm_to_hot", "hot_to_warm", "r")


class TieredStore:
    """Residency manager with byte-accurate accounting over real cold files."""

    def __init__(self, config: TierConfig, n_layers: int, n_heads: int, head_dim: int):
        if config.early_layers_pinned > n_layers:
            raise ValueError("cannot pin more layers than exist")
        self.config = config
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.cold_dir = Path(config.cold_dir)
        self._records: dict[tuple[int, int], list[ChunkRecord]] = {}
        self._hot_used = 0
        self._warm_used = 0
        self._step = 0
        self._row: LedgerRow | None = None
        self._touch_log: dict[tuple[int, int], dict[int, deque[int]]] = {}
        self.ledger_rows: list[LedgerRow] = []

    # -- placement ---------------------------------------------------------------

    def lane_records(self, layer: int, head: int) -> list[ChunkRecord]:
        return self._records[(layer, head)]

    def cold_spans(self, layer: int, head: int) -> list[tuple[int, int]]:
        return [(r.start, r.end) for r in self._records[(layer, head)] if r.tier == COLD]

    @property
    def hot_used(self) -> int:
        return self._hot_used

    @property
    def warm_used(self) -> int:
        return self._warm_used

    def cold_resident_bytes(self, layer: int) -> int:
        return sum(
            r.nbytes
            for (lay, _), recs in self._records.items()
            if lay == layer
            for r in recs
            if r.tier == COLD
        )

    def _data_path(self, layer: int, head: int) -> Path:
        return self.cold_dir / f"layer{layer:03d}_head{head:03d}.kv"

    def _abstract_path(self, layer: int, head: int) -> Path:
        return self.cold_dir / f"layer{layer:03d}_head{head:03d}.abs"

    # -- ledger ------------------------------------------------------------------

    def open_row(self, step: int, layer: int) -> LedgerRow:
        if self._row is not None:
            raise RuntimeError("previous ledger row still open")
        self._step = step
        self._row = LedgerRow(step=step, layer=layer, cold_bytes_at_open=self.cold_resident_bytes(layer))
        return self._row

    def close_row(self) -> LedgerRow:
        if self._row is None:
            raise RuntimeError("no ledger row open")
        row, self._row = self._row, None
        self.ledger_rows.append(row)
        return row

    def transmission_ratio(self, layer: int, step: int | None = None) -> float:
        for row in reversed(self.ledger_rows):
            if row.layer == layer and (step is None or row.step == step):
                return row.r
        raise KeyError(f"no closed ledger row for layer {layer}" + (f", step {step}" if step is not None else ""))

    def write_ledger(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LEDGER_COLUMNS)
            for row in self.ledger_rows:
                writer.writerow(
                    [row.step, row.layer, row.abstract_bytes, row.cold_to_warm, row.warm_to_hot, row.hot_to_warm, str(row.r)]
                )

    # -- frequency table ----------------------------------------------------------

    def touch(self, layer: int, head: int, tokens: Iterable[int]) -> None:
        touched = sorted({int(t) for t in tokens})
        lane = self._touch_log.setdefault((layer, head), {})
        for tok in touched:
            log = lane.setdefault(tok, deque())
            if not log or log[-1] != self._step:  # one touch per token per step
                log.append(self._step)
        if touched:
            for rec in self._records[(layer, head)]:
                if any(rec.start <= t < rec.end for t in touched):
                    rec.access_count += 1
                    rec.last_touch = self._step

    def frequency_exempt(self, layer: int, head: int, start: int, end: int) -> bool:
        lane = self._touch_log.get((layer, head), {})
        horizon = self._step - self.config.frequency_window
        for tok in range(start, end):
            log = lane.get(tok)
            if log is None:
                continue
            while log and log[0] <= horizon:
                log.popleft()
            if len(log) >= self.config.hot_frequency_threshold:
                return True
        return False

    # -- movement -----------------------------------------------------------------

    def _overlapping(self, layer: int, head: int, start: int, end: int) -> list[ChunkRecord]:
        if end <= start:
            raise ValueError(f"empty span [{start}, {end})")
        recs = [r for r in self._records[(layer, head)] if r.start < end and start < r.end]
        if not recs:
            raise ValueError(f"span [{start}, {end}) matches no records of layer {layer} head {head}")
        return recs

    def fetch_chunk(self, layer: int, head: int, start: int, end: int) -> tuple[np.ndarray, np.ndarray]:
        """Move the cold records covering [start, end) to warm; return their payload.

        Granularity is whole placement records: a span partially overlapping a
        record pulls the full record.  Every record touched must currently be
        cold — fetching warm or hot data is a caller bug, not a no-op.
        """
        recs = self._overlapping(layer, head, start, end)
        not_cold = [r for r in recs if r.tier != COLD]
        if not_cold:
            spans = ", ".join(f"[{r.start}, {r.end})={r.tier}" for r in not_cold)
            raise ResidencyError(f"fetch of non-cold data: layer {layer} head {head} {spans}")
        keys_parts: list[np.ndarray] = []
        values_parts: list[np.ndarray] = []
        for rec in sorted(recs, key=lambda r: r.start):
            k, v = self._read_record(layer, head, rec)
            keys_parts.append(k)
            values_parts.append(v)
            rec.tier = WARM
            self._warm_used += rec.nbytes
            rec.last_touch = self._step
            rec.access_count += 1
            if self._row is not None:
                self._row.cold_to_warm += rec.nbytes
                self._row.fetch_ops += 1
        self._evict_warm(exclude={id(r) for r in recs})
        return np.concatenate(keys_parts), np.concatenate(values_parts)

    def promote_hot(self, layer: int, head: int, spans: Iterable[tuple[int, int]]) -> int:
        """Raise the records covering ``spans`` from warm to hot; returns bytes moved."""
        moved = 0
        promoted: set[int] = set()
        for start, end in spans:
            for rec in self._overlapping(layer, head, start, end):
                if rec.tier == COLD:
                    raise ResidencyError(
                        f"promote of cold data: layer {layer} head {head} [{rec.start}, {rec.end}) — fetch it first"
                    )
                rec.last_touch = self._step
                promoted.add(id(rec))
                if rec.tier == WARM:
                    rec.tier = HOT
                    self._warm_used -= rec.nbytes
                    self._hot_used += rec.nbytes
                    moved += rec.nbytes
                    if self._row is not None:
                        self._row.warm_to_hot += rec.nbytes
        self._evict_hot(exclude=promoted)
        self._evict_warm(exclude=promoted)
        return moved

    def ensure_hot(self, layer: int, head: int, spans: Iterable[tuple[int, int]]) -> int:
        """Bring ``spans`` to the hot tier whatever their current residency.

        Records are streamed one at a time — fetch if cold (real read, counted
        cold_to_warm), then promote — so the operation never needs the warm
        tier to hold the whole working set at once, and a record that churns
        back to cold mid-operation is simply re-fetched at its turn.  When
        capacity is short, earlier promotions may be displaced by later ones;
        every record still makes the trip.  Returns warm→hot bytes moved.
        """
        needed: list[ChunkRecord] = []
        seen: set[int] = set()
        for start, end in spans:
            for rec in self._overlapping(layer, head, start, end):
                if id(rec) not in seen:
                    seen.add(id(rec))
                    needed.append(rec)
        moved = 0
        for rec in needed:
            if rec.tier == COLD:
                self.fetch_chunk(layer, head, rec.start, rec.end)
            moved += self.promote_hot(layer, head, [(rec.start, rec.end)])
        return moved

    def _evict_hot(self, exclude: set[int] = frozenset()) -> None:
        while self._hot_used > self.config.hot_capacity:
            pool = [
                r
                for recs in self._records.values()
                for r in recs
                if r.tier == HOT and id(r) not in exclude
            ]
            victims = [r for r in pool if not r.pinned]
            if not victims:  # pinned data may sit warm, just never cold
                victims = pool
            if not victims:
                raise CapacityError("hot tier smaller than the working set of the current step")
            victim = min(victims, key=lambda r: (r.last_touch, r.start, r.layer, r.head))
            victim.tier = WARM
            self._hot_used -= victim.nbytes
            self._warm_used += victim.nbytes
            if self._row is not None:
                self._row.hot_to_warm += victim.nbytes

    def _evict_warm(self, exclude: set[int] = frozenset()) -> None:
        while self._warm_used > self.config.warm_capacity:
            pool = [
                r
                for recs in self._records.values()
                for r in recs
                if r.tier == WARM and id(r) not in exclude and not r.pinned
            ]
            victims = [r for r in pool if not self.frequency_exempt(r.layer, r.head, r.start, r.end)]
            if not victims:
                victims = pool  # every candidate exempt: capacity still wins
            if not victims:
                raise CapacityError("warm tier smaller than the working set of the current step")
            victim = min(victims, key=lambda r: (r.last_touch, r.start, r.layer, r.head))
            if not victim.replica_on_cold:
                raise AssertionError("evictable warm record lost its cold replica")
            victim.tier = COLD  # replica already on disk: eviction writes nothing
            self._warm_used -= victim.nbytes

    # -- cold files ------------------------------------------------------------------

    def _read_record(self, layer: int, head: int, rec: ChunkRecord) -> tuple[np.ndarray, np.ndarray]:
        path = self._data_path(layer, head)
        if not path.is_file():
            raise ColdStoreError(f"missing cold data file {path}")
        plane = rec.n_tokens * self.head_dim * _KV_ELEM_BYTES
        with open(path, "rb") as fh:
            fh.seek(rec.offset)
            raw = fh.read(2 * plane)
        if len(raw) != 2 * plane:
            raise ColdStoreError(f"truncated record [{rec.start}, {rec.end}) in {path}")
        keys = np.frombuffer(raw[:plane], dtype=np.float16).reshape(rec.n_tokens, self.head_dim)
        values = np.frombuffer(raw[plane:], dtype=np.float16).reshape(rec.n_tokens, self.head_dim)
        return keys.astype(np.float32), values.astype(np.float32)

    def load_abstracts(self, layer: int, head: int) -> list[ChunkAbstract]:
        """Read the chunk summaries for this lane's currently-cold records.

        Ships (and accounts) one max-key/min-key pair per cold chunk; the full
        KV payload never moves.  Lanes with nothing cold cost nothing.
        """
        cold = {(r.start, r.end) for r in self._records[(layer, head)] if r.tier == COLD}
        if not cold:
            return []
        path = self._abstract_path(layer, head)
        abstracts = {(a.start, a.end): a for a in _read_abstract_file(path, self.head_dim)}
        out: list[ChunkAbstract] = []
        for span in sorted(cold):
            if span not in abstracts:
                raise ColdStoreError(f"no summary record for cold chunk [{span[0]}, {span[1]}) in {path}")
            out.append(abstracts[span])
        if self._row is not None:
            self._row.abstract_bytes += len(out) * abstract_nbytes(self.head_dim)
        return out

    # -- integrity -------------------------------------------------------------------

    def check_invariants(self) -> None:
        hot = warm = 0
        for (layer, head), recs in self._records.items():
            spans = sorted((r.start, r.end) for r in recs)
            for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
                if e0 != s1:
                    raise AssertionError(f"lane ({layer}, {head}) records do not tile: [{s0},{e0}) then [{s1},{e1})")
            for r in recs:
                if r.tier not in (HOT, WARM, COLD):
                    raise AssertionError(f"bad tier {r.tier!r}")
                if r.tier == HOT:
                    hot += r.nbytes
                elif r.tier == WARM:
                    warm += r.nbytes
                if r.pinned and r.tier == COLD:
                    raise AssertionError(f"pinned record [{r.start}, {r.end}) of layer {r.layer} went cold")
                if r.pinned and r.replica_on_cold:
                    raise AssertionError("pinned record has a disk replica")
                if not r.pinned and r.tier == WARM and not r.replica_on_cold:
                    raise AssertionError("warm record without a write-through replica")
        if hot != self._hot_used or warm != self._warm_used:
            raise AssertionError("tier byte accounting drifted from record states")
        if hot > self.config.hot_capacity or warm > self.config.warm_capacity:
            raise AssertionError("tier over capacity")


def _uniform_spans(n_context: int, chunk_size: int) -> list[tuple[int, int]]:
    return [(s, min(s + chunk_size, n_context)) for s in range(0, n_context, chunk_size)]


def _write_lane_files(
    data_path: Path,
    abstract_path: Path,
    spans: Sequence[tuple[int, int]],
    keys: np.ndarray,
    values: np.ndarray | None,
    head_dim: int,
) -> list[int]:
    """Write one lane's record file + summary file; returns per-record payload offsets."""
    offsets: list[int] = []
    cursor = _FILE_HEADER.size + len(spans) * _TABLE_ENTRY.size
    table = bytearray()
    payload = bytearray()
    for start, end in spans:
        offsets.append(cursor)
        table += _TABLE_ENTRY.pack(start, end, cursor)
        k16 = np.ascontiguousarray(keys[start:end], dtype=np.float16)
        if values is not None:
            v16 = np.ascontiguousarray(values[start:end], dtype=np.float16)
        else:
            v16 = np.zeros((end - start, head_dim), dtype=np.float16)
        payload += k16.tobytes()
        payload += v16.tobytes()
        cursor += len(k16.tobytes()) + len(v16.tobytes())
    with open(data_path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(_DATA_MAGIC, _FILE_VERSION, len(spans), head_dim))
        fh.write(table)
        fh.write(payload)

    with open(abstract_path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(_ABSTRACT_MAGIC, _FILE_VERSION, len(spans), head_dim))
        for start, end in spans:
            block = keys[start:end]
            fh.write(struct.pack("<II", start, end))
            fh.write(np.ascontiguousarray(block.max(axis=0), dtype=np.float32).tobytes())
            fh.write(np.ascontiguousarray(block.min(axis=0), dtype=np.float32).tobytes())
    return offsets


def _read_abstract_file(path: Path, head_dim: int) -> list[ChunkAbstract]:
    if not path.is_file():
        raise ColdStoreError(f"missing summary file {path}")
    raw = path.read_bytes()
    if len(raw) < _FILE_HEADER.size:
        raise ColdStoreError(f"summary file {path} shorter than its header")
    magic, version, n_records, d = _FILE_HEADER.unpack_from(raw, 0)
    if magic != _ABSTRACT_MAGIC or version != _FILE_VERSION:
        raise ColdStoreError(f"summary file {path} has a bad magic/version")
    if d != head_dim:
        raise ColdStoreError(f"summary file {path} head_dim {d} != expected {head_dim}")
    rec_size = 8 + 2 * head_dim * _ABSTRACT_ELEM_BYTES
    if len(raw) != _FILE_HEADER.size + n_records * rec_size:
        raise ColdStoreError(f"summary file {path} has {len(raw)} bytes, expected {_FILE_HEADER.size + n_records * rec_size}")
    out: list[ChunkAbstract] = []
    pos = _FILE_HEADER.size
    for _ in range(n_records):
        start, end = struct.unpack_from("<II", raw, pos)
        pos += 8
        vec = head_dim * _ABSTRACT_ELEM_BYTES
        max_key = np.frombuffer(raw, dtype=np.float32, count=head_dim, offset=pos)
        min_key = np.frombuffer(raw, dtype=np.float32, count=head_dim, offset=pos + vec)
        pos += 2 * vec
        if not (np.isfinite(max_key).all() and np.isfinite(min_key).all()) or (min_key > max_key).any():
            raise ColdStoreError(f"corrupt summary record for chunk [{start}, {end}) in {path}")
        out.append(ChunkAbstract(start=start, end=end, max_key=max_key.astype(np.float64), min_key=min_key.astype(np.float64)))
    return out


def place_initial(
    trace: AttentionTrace,
    config: TierConfig,
    chunk_size: int = 64,
    *,
    spans_by_lane: Mapping[tuple[int, int], Sequence[tuple[int, int]]] | None = None,
) -> TieredStore:
    """Build the initial residency: pinned layers first, then recent tokens downward.

    Pinned layers (``early_layers_pinned``) must fit in hot+warm and write no
    files.  Every other record is written through to its lane's cold file, the
    most recent tokens claim whatever hot/warm space the pinned layers left,
    and the remainder starts cold.
    """
    h = trace.header
    store = TieredStore(config, h.n_layers, h.n_heads, h.head_dim)
    store.cold_dir.mkdir(parents=True, exist_ok=True)

    lanes: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for layer in range(h.n_layers):
        for head in range(h.n_heads):
            if spans_by_lane is not None:
                lanes[(layer, head)] = list(spans_by_lane[(layer, head)])
            else:
                lanes[(layer, head)] = _uniform_spans(h.n_context, chunk_size)

    records: list[ChunkRecord] = []
    for (layer, head), spans in lanes.items():
        pinned = layer < config.early_layers_pinned
        offsets = [0] * len(spans)
        if not pinned:
            offsets = _write_lane_files(
                store._data_path(layer, head),
                store._abstract_path(layer, head),
                spans,
                trace.keys[layer, head],
                trace.values[layer, head] if trace.values is not None else None,
                h.head_dim,
            )
        lane_records = [
            ChunkRecord(
                layer=layer,
                head=head,
                start=start,
                end=end,
                nbytes=kv_nbytes(end - start, h.head_dim),
                tier=COLD,
                pinned=pinned,
                replica_on_cold=not pinned,
                offset=off,
            )
            for (start, end), off in zip(spans, offsets)
        ]
        store._records[(layer, head)] = sorted(lane_records, key=lambda r: r.start)
        records.extend(lane_records)

    pinned_records = [r for r in records if r.pinned]
    if sum(r.nbytes for r in pinned_records) > config.hot_capacity + config.warm_capacity:
        raise CapacityError("pinned layers exceed hot+warm capacity")

    # recency prior: later tokens first; pinned lanes claim space before anyone
    def priority(rec: ChunkRecord) -> tuple:
        return (0 if rec.pinned else 1, -rec.start, rec.layer, rec.head)

    hot_left = config.hot_capacity
    warm_left = config.warm_capacity
    for rec in sorted(records, key=priority):
        if rec.nbytes <= hot_left:
            rec.tier = HOT
            hot_left -= rec.nbytes
        elif rec.nbytes <= warm_left:
            rec.tier = WARM
            warm_left -= rec.nbytes
        elif rec.pinned:
            raise CapacityError(
                f"pinned record [{rec.start}, {rec.end}) of layer {rec.layer} does not fit in hot+warm"
            )
        else:
            rec.tier = COLD
    store._hot_used = config.hot_capacity - hot_left
    store._warm_used = config.warm_capacity - warm_left
    store.check_invariants()
    return store
