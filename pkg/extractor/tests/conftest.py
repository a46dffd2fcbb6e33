"""Tiny checkpoints built on the fly: real architectures, toy sizes.

Both models share a byte-level tokenizer (256 byte units + one end token)
assembled programmatically, so the tests never touch the network.
"""

from __future__ import annotations

import pytest
import torch

PROMPT = "The quick brown fox jumps over the lazy dog, twice at least."


def _save_byte_tokenizer(target_dir) -> None:
    from tokenizers import Tokenizer, decoders, models, pre_tokenizers
    from transformers import PreTrainedTokenizerFast

    alphabet = sorted(pre_tokenizers.ByteLevel.alphabet())
    vocab = {ch: i for i, ch in enumerate(alphabet)}
    vocab["<|end|>"] = len(vocab)
    tok = Tokenizer(models.BPE(vocab=vocab, merges=[]))
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    wrapped = PreTrainedTokenizerFast(tokenizer_object=tok, eos_token="<|end|>")
    wrapped.save_pretrained(target_dir)


@pytest.fixture(scope="session")
def tiny_gpt2(tmp_path_factory) -> str:
    from transformers import GPT2Config, GPT2LMHeadModel

    target = tmp_path_factory.mktemp("tiny-gpt2")
    torch.manual_seed(1234)
    config = GPT2Config(
        n_layer=2, n_head=2, n_embd=32, n_positions=96,
        vocab_size=257, bos_token_id=256, eos_token_id=256,
    )
    GPT2LMHeadModel(config).eval().save_pretrained(target)
    _save_byte_tokenizer(target)
    return str(target)


@pytest.fixture(scope="session")
def tiny_llama(tmp_path_factory) -> str:
    from transformers import LlamaConfig, LlamaForCausalLM

    target = tmp_path_factory.mktemp("tiny-llama")
    torch.manual_seed(4321)
    config = LlamaConfig(
        num_hidden_layers=2, num_attention_heads=4, num_key_value_heads=2,
        hidden_size=32, intermediate_size=64, max_position_embeddings=96,
        vocab_size=257, bos_token_id=256, eos_token_id=256,
    )
    LlamaForCausalLM(config).eval().save_pretrained(target)
    _save_byte_tokenizer(target)
    return str(target)
