"""The extraction loop: prefill, greedy decode, capture, write."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .adapters import cache_layer_kv, detect
from .kvtr import write_kvtr
from .spec import ContextOverflowError, ExtractionSpec, ModelLoadError


def _load(model_id: str):
    from transformers import AutoModelForCausalLM, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModelForCausalLM.from_pretrained(model_id, dtype=torch.float32)
    except Exception as exc:  # transformers raises a zoo of types here
        raise ModelLoadError(f"cannot load {model_id}: {exc}") from exc
    model.eval()
    return model, tokenizer


def _resolve_subset(subset: tuple[int, ...] | None, count: int, name: str) -> list[int]:
    if subset is None:
        return list(range(count))
    bad = [i for i in subset if i >= count]
    if bad:
        raise ValueError(f"{name} subset {bad} out of range for model with {count}")
    return list(subset)


def extract(spec: ExtractionSpec) -> Path:
    """Run one extraction job; returns the written path.

    Greedy decoding only — the token path, and therefore the trace, is a pure
    function of (model weights, prompt, steps).
    """
    model, tokenizer = _load(spec.model)
    adapter = detect(model)

    text = spec.prompt_text()
    ids = tokenizer(text, return_tensors="pt").input_ids
    if ids.shape[1] < 1:
        raise ValueError("prompt tokenizes to no tokens")

    if spec.max_context is not None and spec.max_context > adapter.max_positions:
        raise ContextOverflowError(
            f"max_context {spec.max_context} exceeds model maximum {adapter.max_positions}"
        )
    n_context = ids.shape[1]
    if spec.max_context is not None:
        n_context = min(n_context, spec.max_context)
    if n_context + spec.steps > adapter.max_positions:
        raise ContextOverflowError(
            f"context {n_context} + steps {spec.steps} exceeds model maximum "
            f"{adapter.max_positions}; lower --max-context or --steps"
        )

    layers = _resolve_subset(spec.layers, adapter.n_layers, "layers")
    heads = _resolve_subset(spec.heads, adapter.n_heads, "heads")

    # Prefill the context in one forward; the cache now holds, per layer, the
    # keys/values attention actually used for these tokens.
    with torch.no_grad():
        out = model(ids[:, :n_context], use_cache=True)
    cache = out.past_key_values

    keys = np.empty((len(layers), len(heads), n_context, adapter.head_dim), dtype=np.float32)
    values = np.empty_like(keys) if spec.include_values else None
    for row, layer in enumerate(layers):
        k, v = cache_layer_kv(cache, layer, adapter.n_heads)
        keys[row] = k[heads].to(torch.float32).numpy()
        if values is not None:
            values[row] = v[heads].to(torch.float32).numpy()

    # Greedy decode: one forward per step, hooks catching each layer's query
    # for the newly decoded position.
    queries = np.empty((spec.steps, len(layers), len(heads), adapter.head_dim),
                       dtype=np.float32)
    next_id = out.logits[0, -1].argmax().view(1, 1)
    with adapter.capture_queries(layers):
        for step in range(spec.steps):
            with torch.no_grad():
                out = model(next_id, past_key_values=cache, use_cache=True)
            cache = out.past_key_values
            for row, layer in enumerate(layers):
                queries[step, row] = adapter.query_states(layer, n_context + step)[heads]
            next_id = out.logits[0, -1].argmax().view(1, 1)

    out_path = Path(spec.out)
    write_kvtr(keys, queries, out_path, values=values)
    return out_path
