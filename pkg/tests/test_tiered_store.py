"""Residency placement, byte accounting, eviction, and cold-file integrity."""

from __future__ import annotations

import csv
import math
import struct

import numpy as np
import pytest

from kvtier.tiered_store import (
    COLD,
    HOT,
    LEDGER_COLUMNS,
    WARM,
    CapacityError,
    ColdStoreError,
    ResidencyError,
    TierConfig,
    TieredStore,
    abstract_nbytes,
    kv_nbytes,
    place_initial,
)
from kvtier.trace import AttentionTrace, TraceHeader


def make_trace(n_layers=1, n_heads=1, d=16, n=640, seed=0, with_values=False):
    header = TraceHeader(n_layers, n_heads, d, n, 1, has_values=with_values)
    rng = np.random.default_rng(seed)
    keys = rng.normal(size=(n_layers, n_heads, n, d)).astype(np.float32)
    queries = rng.normal(size=(1, n_layers, n_heads, d)).astype(np.float32)
    values = rng.normal(size=keys.shape).astype(np.float32) if with_values else None
    return AttentionTrace(header, keys, queries, values)


def record_tier(store, layer, head, start):
    for rec in store.lane_records(layer, head):
        if rec.start == start:
            return rec.tier
    raise KeyError(start)


# -- byte arithmetic --------------------------------------------------------------


def test_kv_byte_arithmetic():
    # keys + values at fp16: 64 tokens x 64 dims x 2 planes x 2 bytes
    assert kv_nbytes(64, 64) == 16384
    assert kv_nbytes(32, 64) == 8192
    assert abstract_nbytes(64) == 512  # max + min vectors in float32


def test_abstract_bytes_for_hundred_cold_chunks(tmp_path):
    trace = make_trace(d=64, n=3328)  # 104 chunks of 32
    rec = kv_nbytes(32, 64)
    cfg = TierConfig(hot_capacity=2 * rec, warm_capacity=2 * rec, cold_dir=tmp_path,
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=32)
    assert store.cold_resident_bytes(0) == 100 * rec
    row = store.open_row(0, 0)
    abstracts = store.load_abstracts(0, 0)
    assert len(abstracts) == 100
    assert row.abstract_bytes == 51200  # 100 * 2 * 64 * 4
    store.close_row()


# -- placement -------------------------------------------------------------------


def test_placement_fractions_and_recency(tmp_path):
    trace = make_trace(d=16, n=640)  # 20 chunks of 32, 2048 bytes each
    rec = kv_nbytes(32, 16)
    cfg = TierConfig(hot_capacity=2 * rec, warm_capacity=6 * rec, cold_dir=tmp_path,
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=32)
    assert store.hot_used == 2 * rec and store.warm_used == 6 * rec
    assert store.cold_resident_bytes(0) == 12 * rec  # 60% stays cold
    # the most recent tokens are hot, then warm, the oldest stay cold
    assert record_tier(store, 0, 0, 608) == HOT and record_tier(store, 0, 0, 576) == HOT
    assert record_tier(store, 0, 0, 544) == WARM and record_tier(store, 0, 0, 384) == WARM
    assert store.cold_spans(0, 0) == [(s, s + 32) for s in range(0, 384, 32)]
    store.check_invariants()


def test_pinned_layers_never_touch_disk(tmp_path):
    trace = make_trace(n_layers=3, d=8, n=64)
    rec = kv_nbytes(16, 8)  # 512
    cfg = TierConfig(hot_capacity=8 * rec, warm_capacity=2 * rec, cold_dir=tmp_path,
                     early_layers_pinned=2)
    store = place_initial(trace, cfg, chunk_size=16)
    assert store.cold_resident_bytes(0) == 0
    assert store.cold_resident_bytes(1) == 0
    assert store.cold_resident_bytes(2) == 2 * rec
    for layer in (0, 1):
        assert not list(tmp_path.glob(f"layer{layer:03d}_*"))
        for r in store.lane_records(layer, 0):
            assert r.pinned and not r.replica_on_cold and r.tier in (HOT, WARM)
    assert list(tmp_path.glob("layer002_head000.kv"))
    assert list(tmp_path.glob("layer002_head000.abs"))
    store.check_invariants()


def test_pinned_overflow_is_a_config_error(tmp_path):
    trace = make_trace(n_layers=2, d=8, n=64)
    cfg = TierConfig(hot_capacity=512, warm_capacity=512, cold_dir=tmp_path,
                     early_layers_pinned=2)  # two pinned layers need 4096 bytes
    with pytest.raises(CapacityError):
        place_initial(trace, cfg, chunk_size=16)


def test_everything_fits_hot_nothing_cold(tmp_path):
    trace = make_trace(d=8, n=64)
    cfg = TierConfig(hot_capacity=1 << 20, warm_capacity=1 << 20, cold_dir=tmp_path,
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=16)
    assert store.cold_resident_bytes(0) == 0
    row = store.open_row(0, 0)
    assert store.load_abstracts(0, 0) == []
    assert store.close_row().r == 0.0


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TierConfig(hot_capacity=0, warm_capacity=1, cold_dir=tmp_path)
    with pytest.raises(ValueError):
        TierConfig(hot_capacity=1, warm_capacity=1, cold_dir=tmp_path, bandwidth_hot_warm=0)
    with pytest.raises(ValueError):
        TieredStore(TierConfig(hot_capacity=1, warm_capacity=1, cold_dir=tmp_path,
                               early_layers_pinned=3), n_layers=2, n_heads=1, head_dim=4)


# -- fetch and payload ------------------------------------------------------------


def test_fetch_moves_bytes_and_round_trips_fp16(tmp_path):
    trace = make_trace(d=64, n=256, with_values=True)
    rec = kv_nbytes(64, 64)
    cfg = TierConfig(hot_capacity=rec, warm_capacity=2 * rec, cold_dir=tmp_path,
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=64)
    assert record_tier(store, 0, 0, 0) == COLD
    row = store.open_row(0, 0)
    keys, values = store.fetch_chunk(0, 0, 0, 64)
    assert row.cold_to_warm == 16384 and row.fetch_ops == 1
    assert record_tier(store, 0, 0, 0) == WARM
    expect_k = trace.keys[0, 0, :64].astype(np.float16).astype(np.float32)
    expect_v = trace.values[0, 0, :64].astype(np.float16).astype(np.float32)
    np.testing.assert_array_equal(keys, expect_k)
    np.testing.assert_array_equal(values, expect_v)
    store.close_row()
    store.check_invariants()


def test_fetch_of_warm_data_is_an_error(tmp_path):
    trace = make_trace(d=8, n=64)
    cfg = TierConfig(hot_capacity=512, warm_capacity=1024, cold_dir=tmp_path,
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=16)
    assert store.cold_spans(0, 0) == [(0, 16)]
    store.fetch_chunk(0, 0, 0, 16)
    with pytest.raises(ResidencyError):
        store.fetch_chunk(0, 0, 0, 16)
    with pytest.raises(ValueError):
        store.fetch_chunk(0, 0, 64, 80)  # outside the context
    with pytest.raises(ValueError):
        store.fetch_chunk(0, 0, 16, 16)  # empty span


def test_fetch_granularity_is_whole_records(tmp_path):
    trace = make_trace(d=8, n=64)
    cfg = TierConfig(hot_capacity=512, warm_capacity=1024, cold_dir=tmp_path,
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=16)
    row = store.open_row(0, 0)
    keys, _ = store.fetch_chunk(0, 0, 3, 5)  # partial overlap pulls the full record
    assert keys.shape == (16, 8)
    assert row.cold_to_warm == kv_nbytes(16, 8)
    store.close_row()


def test_eviction_is_ledger_free_and_replica_backed(tmp_path):
    trace = make_trace(d=8, n=128)  # 8 chunks of 16, 512 bytes each
    cfg = TierConfig(hot_capacity=512, warm_capacity=1024, cold_dir=tmp_path,
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=16)
    cold_before = [s for s, _ in store.cold_spans(0, 0)]
    row = store.open_row(0, 0)
    for start in cold_before[:4]:  # fetch more than warm holds -> churn
        store.fetch_chunk(0, 0, start, start + 16)
        store.check_invariants()
    row = store.close_row()
    assert row.cold_to_warm == 4 * 512
    assert row.hot_to_warm == 0 and row.warm_to_hot == 0
    # an evicted record is cold again and can be re-fetched from its replica
    evicted = [s for s, _ in store.cold_spans(0, 0) if s in cold_before[:4]]
    assert evicted, "warm churn should have pushed an early fetch back to cold"
    keys, _ = store.fetch_chunk(0, 0, evicted[0], evicted[0] + 16)
    expect = trace.keys[0, 0, evicted[0] : evicted[0] + 16].astype(np.float16).astype(np.float32)
    np.testing.assert_array_equal(keys, expect)


def test_promote_and_ensure_hot(tmp_path):
    trace = make_trace(d=8, n=128)
    rec = kv_nbytes(16, 8)
    cfg = TierConfig(hot_capacity=2 * rec, warm_capacity=4 * rec, cold_dir=tmp_path,
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=16)
    row = store.open_row(0, 0)
    store.fetch_chunk(0, 0, 0, 16)
    moved = store.promote_hot(0, 0, [(0, 16)])
    assert moved == rec and row.warm_to_hot == rec
    assert record_tier(store, 0, 0, 0) == HOT
    assert row.hot_to_warm == rec  # hot was full: promoting evicted its LRU resident
    with pytest.raises(ResidencyError):
        store.promote_hot(0, 0, [(16, 32)])  # still cold
    moved = store.ensure_hot(0, 0, [(16, 32)])  # fetches, then promotes
    assert record_tier(store, 0, 0, 16) == HOT
    assert row.cold_to_warm == 2 * rec
    store.close_row()
    store.check_invariants()


# -- transmission ratio -----------------------------------------------------------


def test_transmission_ratio_identity(tmp_path):
    # 120 uniform records; hot and warm each hold 10, so 100 start cold.
    d, n = 64, 3840
    trace = make_trace(d=d, n=n, seed=7)
    rec = kv_nbytes(32, d)  # 8192
    cfg = TierConfig(hot_capacity=10 * rec, warm_capacity=10 * rec, cold_dir=tmp_path,
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=32)
    assert store.cold_resident_bytes(0) == 100 * rec

    row = store.open_row(0, 0)
    assert len(store.load_abstracts(0, 0)) == 100
    for c in range(10):  # fetch 10% of the cold chunks
        store.fetch_chunk(0, 0, c * 320, c * 320 + 32)
    row = store.close_row()
    assert row.abstract_bytes == 51200 and row.cold_to_warm == 10 * rec
    assert row.r == 0.1625  # = 0.1 + 2/32, exactly
    assert store.transmission_ratio(0, step=0) == 0.1625

    # nothing fetched -> r = 2/n'
    store.open_row(1, 0)
    store.load_abstracts(0, 0)
    assert store.close_row().r == 0.0625

    # everything fetched -> r = 1 + 2/n'
    store.open_row(2, 0)
    store.load_abstracts(0, 0)
    for start, end in list(store.cold_spans(0, 0)):
        store.fetch_chunk(0, 0, start, end)
    assert store.close_row().r == 1.0625
    store.check_invariants()


def test_ledger_csv_format(tmp_path):
    trace = make_trace(d=64, n=3840, seed=7)
    rec = kv_nbytes(32, 64)
    cfg = TierConfig(hot_capacity=10 * rec, warm_capacity=10 * rec, cold_dir=tmp_path / "cold",
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=32)
    store.open_row(0, 0)
    store.load_abstracts(0, 0)
    for c in range(10):
        store.fetch_chunk(0, 0, c * 320, c * 320 + 32)
    store.close_row()
    out = tmp_path / "ledger.csv"
    store.write_ledger(out)
    rows = list(csv.reader(out.open()))
    assert rows[0] == list(LEDGER_COLUMNS)
    assert rows[1] == ["0", "0", "51200", "81920", "0", "0", "0.1625"]


# -- access frequency table --------------------------------------------------------


def exemption_scenario(tmp_path, threshold):
    trace = make_trace(d=8, n=320, seed=2)  # 40 chunks of 8, 256 bytes each
    rec = kv_nbytes(8, 8)
    cfg = TierConfig(hot_capacity=rec, warm_capacity=4 * rec, cold_dir=tmp_path,
                     early_layers_pinned=0, hot_frequency_threshold=threshold,
                     frequency_window=16)
    store = place_initial(trace, cfg, chunk_size=8)
    hot_start = 312
    warm_starts = [280, 288, 296, 304]
    assert record_tier(store, 0, 0, hot_start) == HOT
    for s in warm_starts:
        assert record_tier(store, 0, 0, s) == WARM
    repeat = 280  # the record we keep re-reading
    for step in range(6):
        store.open_row(step, 0)
        store.touch(0, 0, range(repeat, repeat + 8))
        store.close_row()
    fetched = 0
    for step, start in zip(range(6, 10), (0, 8, 16, 24)):
        store.open_row(step, 0)
        store.fetch_chunk(0, 0, start, start + 8)
        fetched += store.close_row().cold_to_warm
    # final step: the repeat record is needed again
    store.open_row(10, 0)
    store.ensure_hot(0, 0, [(repeat, repeat + 8)])
    final = store.close_row().cold_to_warm
    store.check_invariants()
    return record_tier(store, 0, 0, repeat), final


def test_frequency_exemption_keeps_repeat_chunks_off_cold(tmp_path):
    tier, refetch_bytes = exemption_scenario(tmp_path / "on", threshold=4)
    assert tier == HOT and refetch_bytes == 0
    tier, refetch_bytes = exemption_scenario(tmp_path / "off", threshold=10**6)
    assert refetch_bytes == kv_nbytes(8, 8)  # churn evicted it; access repaid in I/O


def test_exemption_flag_semantics(tmp_path):
    trace = make_trace(d=8, n=64)
    cfg = TierConfig(hot_capacity=512, warm_capacity=512, cold_dir=tmp_path,
                     early_layers_pinned=0, hot_frequency_threshold=5)
    store = place_initial(trace, cfg, chunk_size=16)
    for step in range(10):
        store.open_row(step, 0)
        store.touch(0, 0, [3])
        store.close_row()
    assert store.frequency_exempt(0, 0, 0, 16)  # token 3 crossed the threshold
    assert not store.frequency_exempt(0, 0, 16, 32)  # untouched span
    assert not store.frequency_exempt(0, 0, 4, 16)  # chunk exempt via any token, not these


def test_all_exempt_still_respects_capacity(tmp_path):
    trace = make_trace(d=8, n=64)  # 4 chunks of 16
    cfg = TierConfig(hot_capacity=512, warm_capacity=512, cold_dir=tmp_path,
                     early_layers_pinned=0, hot_frequency_threshold=1)
    store = place_initial(trace, cfg, chunk_size=16)
    warm_start = next(s for s, _ in [(r.start, r.end) for r in store.lane_records(0, 0) if r.tier == WARM])
    for step in range(3):
        store.open_row(step, 0)
        store.touch(0, 0, range(warm_start, warm_start + 16))
        store.close_row()
    assert store.frequency_exempt(0, 0, warm_start, warm_start + 16)
    store.open_row(3, 0)
    cold = store.cold_spans(0, 0)[0]
    store.fetch_chunk(0, 0, *cold)  # warm over capacity; only exempt victims exist
    store.close_row()
    store.check_invariants()  # capacity won: the exempt record was evicted anyway
    assert record_tier(store, 0, 0, warm_start) == COLD


# -- cold-file integrity ------------------------------------------------------------


def test_corrupt_abstract_record_named_in_error(tmp_path):
    trace = make_trace(d=8, n=64)
    cfg = TierConfig(hot_capacity=512, warm_capacity=512, cold_dir=tmp_path,
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=16)
    path = tmp_path / "layer000_head000.abs"
    raw = bytearray(path.read_bytes())
    struct.pack_into("<f", raw, 16 + 8, float("nan"))  # first record's max-key[0]
    path.write_bytes(bytes(raw))
    with pytest.raises(ColdStoreError, match=r"\[0, 16\)"):
        store.load_abstracts(0, 0)


def test_truncated_and_missing_files(tmp_path):
    trace = make_trace(d=8, n=64)
    cfg = TierConfig(hot_capacity=512, warm_capacity=512, cold_dir=tmp_path,
                     early_layers_pinned=0)
    store = place_initial(trace, cfg, chunk_size=16)
    abs_path = tmp_path / "layer000_head000.abs"
    abs_path.write_bytes(abs_path.read_bytes() + b"x")
    with pytest.raises(ColdStoreError, match="expected"):
        store.load_abstracts(0, 0)
    data_path = tmp_path / "layer000_head000.kv"
    data_path.write_bytes(data_path.read_bytes()[:600])  # cuts into record [16, 32)
    with pytest.raises(ColdStoreError, match="truncated"):
        store.fetch_chunk(0, 0, 16, 32)
    data_path.unlink()
    with pytest.raises(ColdStoreError, match="missing"):
        store.fetch_chunk(0, 0, *store.cold_spans(0, 0)[0])


# -- random op soup keeps invariants -------------------------------------------------


def test_invariants_under_random_operations(tmp_path):
    trace = make_trace(n_layers=2, d=8, n=128, seed=3)
    rec = kv_nbytes(16, 8)  # layer 0 is pinned: its 8 records need 4096 bytes up front
    cfg = TierConfig(hot_capacity=9 * rec, warm_capacity=3 * rec, cold_dir=tmp_path,
                     early_layers_pinned=1)
    store = place_initial(trace, cfg, chunk_size=16)
    rng = np.random.default_rng(4)
    for step in range(40):
        store.open_row(step, 1)
        op = rng.integers(0, 3)
        start = int(rng.integers(0, 8)) * 16
        try:
            if op == 0:
                store.fetch_chunk(1, 0, start, start + 16)
            elif op == 1:
                store.ensure_hot(1, 0, [(start, start + 16)])
            else:
                store.touch(1, 0, range(start, start + 16))
        except ResidencyError:
            pass  # fetch of already-resident data is a legal rejection
        store.close_row()
        store.check_invariants()
    assert store.cold_resident_bytes(0) == 0  # pinned layer never leaked cold
