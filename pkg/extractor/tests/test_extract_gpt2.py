"""Extraction against the fused-projection, absolute-position family."""

import numpy as np
import torch

from kvtier_extractor import ExtractionSpec, extract

from .conftest import PROMPT
from .util import assert_queries_match_attention, read_kvtr, replay_with_attentions

STEPS = 6


def run_extract(model_dir, tmp_path, **kw):
    out = tmp_path / "trace.kvtr"
    spec = ExtractionSpec(model=model_dir, prompt=PROMPT, steps=STEPS,
                          out=str(out), **kw)
    return read_kvtr(extract(spec))


def test_header_matches_model_config(tiny_gpt2, tmp_path):
    header, keys, values, queries = run_extract(tiny_gpt2, tmp_path)
    assert header["n_layers"] == 2
    assert header["n_heads"] == 2
    assert header["head_dim"] == 16
    assert header["n_steps"] == STEPS
    assert header["n_context"] == len(PROMPT)  # byte tokenizer: one token per char
    assert not header["has_values"]
    assert values is None
    assert queries.shape == (STEPS, 2, 2, 16)


def test_keys_equal_decode_cache(tiny_gpt2, tmp_path):
    """The trace keys must be bitwise what the attention cache held."""
    _, keys, _, _ = run_extract(tiny_gpt2, tmp_path)
    cache_kv, _ = replay_with_attentions(tiny_gpt2, PROMPT, steps=1)
    for layer in range(2):
        expected = cache_kv[layer][0][0].to(torch.float32).numpy()  # [H, N, D]
        assert np.array_equal(keys[layer], expected)


def test_values_flag_captures_cache_values(tiny_gpt2, tmp_path):
    header, _, values, _ = run_extract(tiny_gpt2, tmp_path, include_values=True)
    assert header["has_values"] and values is not None
    cache_kv, _ = replay_with_attentions(tiny_gpt2, PROMPT, steps=1)
    for layer in range(2):
        expected = cache_kv[layer][1][0].to(torch.float32).numpy()
        assert np.array_equal(values[layer], expected)


def test_queries_reproduce_attention_pattern(tiny_gpt2, tmp_path):
    """Captured queries, scored against captured keys, must match the
    model's own attention distribution over the prompt at every step."""
    _, keys, _, queries = run_extract(tiny_gpt2, tmp_path)
    _, attentions = replay_with_attentions(tiny_gpt2, PROMPT, steps=STEPS,
                                           attn_implementation="eager")
    assert_queries_match_attention(keys, queries, attentions)


def test_extraction_is_deterministic(tiny_gpt2, tmp_path):
    a = tmp_path / "a.kvtr"
    b = tmp_path / "b.kvtr"
    for out in (a, b):
        extract(ExtractionSpec(model=tiny_gpt2, prompt=PROMPT, steps=STEPS,
                               out=str(out)))
    assert a.read_bytes() == b.read_bytes()
