"""Model-family adapters: where queries and keys live inside each architecture.

Keys and values are read from the decode cache, which holds exactly what the
attention consumed (for rotary models that is the post-rotary key).  Queries
are captured by hooking the query projection during each decode forward and,
for rotary models, applying the model's own position embedding — the same
tensors the attention kernel saw.

Grouped-query models replicate each KV head across its query-head group at
export time, mirroring the expansion the attention performs internally, so
the emitted trace has one key set per query head.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import torch


class GPT2Adapter:
    """GPT-2 family: fused c_attn projection, learned absolute positions.

    No positional transform touches queries or keys after projection, so the
    projection output is what attention consumes.
    """

    model_types = ("gpt2",)

    def __init__(self, model):
        self.model = model
        cfg = model.config
        self.n_layers = cfg.n_layer
        self.n_heads = cfg.n_head
        self.n_kv_heads = cfg.n_head
        self.head_dim = cfg.n_embd // cfg.n_head
        self.max_positions = cfg.n_positions
        self._blocks = model.transformer.h
        self._captured: dict[int, torch.Tensor] = {}

    @contextmanager
    def capture_queries(self, layers: list[int]):
        handles = []
        for layer in layers:
            def hook(_mod, _args, output, layer=layer):
                # fused projection: [B, T, 3E] splits into query, key, value
                embed = output.shape[-1] // 3
                self._captured[layer] = output[..., :embed].detach()
            handles.append(self._blocks[layer].attn.c_attn.register_forward_hook(hook))
        try:
            yield
        finally:
            for h in handles:
                h.remove()

    def query_states(self, layer: int, position: int) -> np.ndarray:
        """[H, D] query for the single token decoded at ``position``."""
        q = self._captured[layer]  # [B=1, T=1, E]
        q = q.view(1, q.shape[1], self.n_heads, self.head_dim)
        return q[0, -1].to(torch.float32).numpy()


class LlamaAdapter:
    """Llama family: separate projections, rotary positions, optional GQA."""

    model_types = ("llama",)

    def __init__(self, model):
        self.model = model
        cfg = model.config
        self.n_layers = cfg.num_hidden_layers
        self.n_heads = cfg.num_attention_heads
        self.n_kv_heads = getattr(cfg, "num_key_value_heads", cfg.num_attention_heads)
        self.head_dim = getattr(cfg, "head_dim", None) or cfg.hidden_size // cfg.num_attention_heads
        self.max_positions = cfg.max_position_embeddings
        self._decoder = model.model
        self._blocks = self._decoder.layers
        self._rotary = self._decoder.rotary_emb
        self._captured: dict[int, torch.Tensor] = {}

    @contextmanager
    def capture_queries(self, layers: list[int]):
        handles = []
        for layer in layers:
            def hook(_mod, _args, output, layer=layer):
                self._captured[layer] = output.detach()
            handles.append(
                self._blocks[layer].self_attn.q_proj.register_forward_hook(hook)
            )
        try:
            yield
        finally:
            for h in handles:
                h.remove()

    def query_states(self, layer: int, position: int) -> np.ndarray:
        q = self._captured[layer]  # [B=1, T=1, H*D]
        q = q.view(1, q.shape[1], self.n_heads, self.head_dim).transpose(1, 2)
        pos = torch.tensor([[position]], dtype=torch.long)
        cos, sin = self._rotary(q, pos)  # [1, 1, D] each
        half = self.head_dim // 2
        rotated = torch.cat((-q[..., half:], q[..., :half]), dim=-1)
        q = q * cos.unsqueeze(1) + rotated * sin.unsqueeze(1)
        return q[0, :, -1].to(torch.float32).numpy()


_ADAPTERS = (GPT2Adapter, LlamaAdapter)


def detect(model):
    """Pick the adapter for this checkpoint by its declared model type."""
    model_type = getattr(model.config, "model_type", "?")
    for cls in _ADAPTERS:
        if model_type in cls.model_types:
            return cls(model)
    supported = ", ".join(t for cls in _ADAPTERS for t in cls.model_types)
    raise ValueError(f"unsupported model family {model_type!r} (supported: {supported})")


def cache_layer_kv(cache, layer: int, n_heads: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Keys and values of one cache layer, replicated to one set per query head.

    Returns two [n_heads, T, D] tensors.  The cache stores what attention
    consumed, so no positional correction is needed here.
    """
    entry = cache.layers[layer]
    keys, values = entry.keys[0], entry.values[0]  # [H_kv, T, D]
    n_kv = keys.shape[0]
    if n_heads % n_kv:
        raise ValueError(f"{n_heads} query heads not a multiple of {n_kv} KV heads")
    rep = n_heads // n_kv
    if rep > 1:
        keys = keys.repeat_interleave(rep, dim=0)
        values = values.repeat_interleave(rep, dim=0)
    return keys, values
