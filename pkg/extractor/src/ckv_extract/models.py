"""Model loading and per-layer value capture.

Supports Hugging Face causal LMs whose attention blocks expose either a
fused query/key/value projection (GPT-2's ``c_attn``) or a separate value
projection (``v_proj``, the Llama/Mistral layout).  Grouped-query models
share value heads across query heads; the capture step replicates them so
every trace exposes one value vector per query head.

``RANDOM_GPT2`` is a deterministic, randomly initialized 2-layer GPT-2 with
a byte-level tokenizer — it needs no downloaded weights and exercises the
exact same capture path as a pretrained checkpoint.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import torch

RANDOM_GPT2 = "random-gpt2"

_VALUE_MODULE = re.compile(r"\.(?:h|layers)\.(\d+)\.(?:self_)?attn\.(c_attn|v_proj)$")


class ByteTokenizer:
    """UTF-8 byte ids; vocabulary is exactly the 256 byte values."""

    vocab_size = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))


@dataclass
class LoadedModel:
    model: torch.nn.Module
    tokenizer: object
    num_layers: int
    num_heads: int
    num_value_heads: int
    head_dim: int
    name: str


def _random_gpt2(seed: int) -> LoadedModel:
    from transformers import GPT2Config, GPT2LMHeadModel

    config = GPT2Config(vocab_size=ByteTokenizer.vocab_size, n_positions=512,
                        n_embd=32, n_layer=2, n_head=2,
                        attn_implementation="eager")
    torch.manual_seed(seed)
    model = GPT2LMHeadModel(config)
    model.eval()
    return LoadedModel(model=model, tokenizer=ByteTokenizer(),
                       num_layers=2, num_heads=2, num_value_heads=2,
                       head_dim=16, name=RANDOM_GPT2)


def load_model(name: str, device: str = "cpu", seed: int = 0) -> LoadedModel:
    """Load ``name`` from the Hugging Face cache/hub, or build the built-in
    random model when ``name`` is ``random-gpt2``."""
    if name == RANDOM_GPT2:
        lm = _random_gpt2(seed)
    else:
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(name)
        model = AutoModelForCausalLM.from_pretrained(
            name, attn_implementation="eager")
        model.eval()
        cfg = model.config
        heads = getattr(cfg, "num_attention_heads", None) or cfg.n_head
        hidden = getattr(cfg, "hidden_size", None) or cfg.n_embd
        lm = LoadedModel(
            model=model, tokenizer=tokenizer,
            num_layers=getattr(cfg, "num_hidden_layers", None) or cfg.n_layer,
            num_heads=heads,
            num_value_heads=getattr(cfg, "num_key_value_heads", heads) or heads,
            head_dim=getattr(cfg, "head_dim", None) or hidden // heads,
            name=name)
    lm.model.to(device)
    return lm


class ValueCapture:
    """Forward hooks on every attention value projection.

    After a forward pass, ``per_head_norms(T)`` returns the (L, H, T) L2
    norms of the per-head value vectors, with shared value heads replicated
    across their query-head group.
    """

    def __init__(self, lm: LoadedModel):
        self._lm = lm
        self._raw: dict[int, torch.Tensor] = {}
        self._kinds: dict[int, str] = {}
        self._handles = []
        for name, module in lm.model.named_modules():
            m = _VALUE_MODULE.search(name)
            if m is None:
                continue
            layer, kind = int(m.group(1)), m.group(2)
            self._kinds[layer] = kind
            self._handles.append(module.register_forward_hook(
                self._make_hook(layer)))
        if len(self._kinds) != lm.num_layers:
            self.close()
            raise RuntimeError(
                f"value hooks found {sorted(self._kinds)} of "
                f"{lm.num_layers} attention layers in {lm.name!r}")

    def _make_hook(self, layer: int):
        def hook(module, args, output):
            out = output[0] if isinstance(output, tuple) else output
            self._raw[layer] = out.detach()
        return hook

    def per_head_norms(self, seq_len: int) -> np.ndarray:
        lm = self._lm
        norms = np.empty((lm.num_layers, lm.num_heads, seq_len),
                         dtype=np.float64)
        for layer in range(lm.num_layers):
            out = self._raw[layer][0]  # (T, projection width)
            if self._kinds[layer] == "c_attn":
                values = out.chunk(3, dim=-1)[2]
            else:
                values = out
            v = values.reshape(seq_len, lm.num_value_heads, lm.head_dim)
            v = v.permute(1, 0, 2)  # (value heads, T, d_head)
            if lm.num_value_heads != lm.num_heads:
                v = v.repeat_interleave(lm.num_heads // lm.num_value_heads,
                                        dim=0)
            norms[layer] = torch.linalg.vector_norm(
                v.double(), dim=-1).cpu().numpy()
        return norms

    def close(self) -> None:
        for h in self._handles:
            h.remove()
        self._handles.clear()
        self._raw.clear()
