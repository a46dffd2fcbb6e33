"""Shared oracles: independent re-decode, and a minimal .kvtr reader."""

from __future__ import annotations

import struct

import numpy as np
import torch

_HEADER = struct.Struct("<4s7I")


def read_kvtr(path):
    """Parse a .kvtr file -> (header dict, keys, values | None, queries)."""
    data = open(path, "rb").read()
    magic, version, L, H, D, N, S, flags = _HEADER.unpack_from(data)
    assert magic == b"KVTR" and version == 1
    off = _HEADER.size
    n_keys = L * H * N * D
    keys = np.frombuffer(data, "<f4", n_keys, off).reshape(L, H, N, D)
    off += 4 * n_keys
    values = None
    if flags & 1:
        values = np.frombuffer(data, "<f4", n_keys, off).reshape(L, H, N, D)
        off += 4 * n_keys
    n_q = S * L * H * D
    queries = np.frombuffer(data, "<f4", n_q, off).reshape(S, L, H, D)
    assert off + 4 * n_q == len(data), "trailing bytes"
    header = dict(n_layers=L, n_heads=H, head_dim=D, n_context=N, n_steps=S,
                  has_values=bool(flags & 1))
    return header, keys, values, queries


def replay_with_attentions(model_dir: str, prompt: str, steps: int,
                           max_context: int | None = None,
                           attn_implementation: str | None = None):
    """Re-run the same greedy decode, independently of the extractor.

    Returns (cache_kv, attentions): the prefill cache's per-layer (keys,
    values) tensors [1, H_kv, N, D], and — only under ``"eager"``, the one
    implementation that reports them — per step a list over layers of
    attention-weight tensors [H, 1, T].

    Cache comparisons should replay with the default implementation (the one
    the extractor runs under): from layer 1 on, cached keys depend on the
    previous layer's attention *output*, so a different kernel shifts them by
    an ulp and bitwise checks would test the kernel, not the plumbing.
    """
    from transformers import AutoModelForCausalLM, AutoTokenizer

    tok = AutoTokenizer.from_pretrained(model_dir)
    kw = {"attn_implementation": attn_implementation} if attn_implementation else {}
    model = AutoModelForCausalLM.from_pretrained(
        model_dir, dtype=torch.float32, **kw
    ).eval()
    want_weights = attn_implementation == "eager"
    ids = tok(prompt, return_tensors="pt").input_ids
    if max_context is not None:
        ids = ids[:, :max_context]
    with torch.no_grad():
        out = model(ids, use_cache=True)
    cache = out.past_key_values
    cache_kv = [
        (cache.layers[i].keys.clone(), cache.layers[i].values.clone())
        for i in range(len(cache.layers))
    ]
    attentions = []
    nxt = out.logits[0, -1].argmax().view(1, 1)
    for _ in range(steps):
        with torch.no_grad():
            out = model(nxt, past_key_values=cache, use_cache=True,
                        output_attentions=want_weights)
        cache = out.past_key_values
        if want_weights:
            attentions.append([a.detach()[0] for a in out.attentions])
        nxt = out.logits[0, -1].argmax().view(1, 1)
    return cache_kv, attentions


def assert_queries_match_attention(keys, queries, attentions, atol=1e-4):
    """Captured queries must reproduce the model's own attention pattern.

    The model's softmax at decode step s spans the prompt plus s+1 decoded
    tokens; the trace stores only the prompt keys, so compare mean-centered
    log-probabilities against mean-centered trace logits over the prompt
    columns — the normalizer cancels, everything else must agree.
    """
    L, H, N, D = keys.shape
    for s, per_layer in enumerate(attentions):
        for layer in range(L):
            for head in range(H):
                probs = per_layer[layer][head, 0, :N].to(torch.float64).numpy()
                logits = (
                    queries[s, layer, head].astype(np.float64)
                    @ keys[layer, head].astype(np.float64).T
                ) / np.sqrt(D)
                log_p = np.log(probs)
                np.testing.assert_allclose(
                    log_p - log_p.mean(), logits - logits.mean(), atol=atol,
                    err_msg=f"step {s} layer {layer} head {head}",
                )
