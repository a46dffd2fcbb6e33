"""
Synthetic attention traces and the .kvtr container
==================================================

Builds a trace whose score landscape is mostly flat ("desert") with a few
narrow high-scoring regions, round-trips it through the binary container,
and shows why top-k selection has something to find.
"""

import tempfile
from pathlib import Path

import numpy as np

from kvtier import (
    DesertProfile,
    TraceHeader,
    generate_synthetic,
    read_trace,
    score_tokens,
    validate_trace,
    write_trace,
)

# A trace is keys [L, H, N, D] plus one query per decode step [S, L, H, D];
# values are optional.  The generator plants hot regions per (layer, head)
# lane and fills the rest with low-amplitude noise.
header = TraceHeader(n_layers=2, n_heads=2, head_dim=64, n_context=1024,
                     n_steps=4, has_values=True)
profile = DesertProfile(desert_rate=0.7, n_hot_regions=3, score_gap=1.0, seed=42)
trace = generate_synthetic(profile, header)
print(f"keys    {trace.keys.shape}  {trace.keys.dtype}")
print(f"queries {trace.queries.shape}")
print(f"values  {trace.values.shape}")

# The landscape: score every token of one lane against the first query.
# With desert_rate 0.7, roughly 30% of tokens should clear the gap.
q = trace.queries[0, 0, 0].astype(np.float64)
scores = score_tokens(q, trace.keys[0, 0].astype(np.float64))
threshold = (scores.max() + scores.min()) / 2
hot = int((scores > threshold) .sum())
print(f"\nlane (0,0): score range [{scores.min():.3f}, {scores.max():.3f}], "
      f"{hot}/{header.n_context} tokens above the midpoint "
      f"(~{1 - profile.desert_rate:.0%} expected hot)")

# Round trip through the on-disk container.  The writer returns the byte
# count; the validator re-reads the file and reports findings (empty = ok).
with tempfile.TemporaryDirectory() as td:
    path = Path(td) / "landscape.kvtr"
    nbytes = write_trace(trace, path)
    print(f"\nwrote {path.name}: {nbytes:,} bytes")

    findings = validate_trace(path)
    print(f"validate: {'ok' if not findings else findings}")

    back = read_trace(path)
    assert np.array_equal(back.keys, trace.keys)
    assert np.array_equal(back.queries, trace.queries)
    assert np.array_equal(back.values, trace.values)
    print("read back: arrays identical")

# Generation is fully deterministic per (seed, layer, head): the same profile
# always yields the same bytes, so traces never need to be shipped around.
again = generate_synthetic(profile, header)
assert np.array_equal(again.keys, trace.keys)
print("regenerated from the same profile: identical")
