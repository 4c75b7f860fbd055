import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ckv import TinyLMConfig, init_weights, prefill, sample_tokens


@pytest.fixture(scope="session")
def tiny_config():
    return TinyLMConfig(num_layers=2, num_heads=2, head_dim=8, vocab_size=64,
                        max_seq_len=128, seed=11)


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return init_weights(tiny_config)


@pytest.fixture(scope="session")
def small_trace(tiny_weights):
    rng = np.random.default_rng(5)
    tokens = rng.integers(0, tiny_weights.config.vocab_size, 24)
    trace = prefill(tiny_weights, tokens)
    trace.window_size = 8
    return trace


@pytest.fixture(scope="session")
def lm_corpus(tiny_weights):
    """A handful of prefill traces with mixed token statistics."""
    traces = []
    rng = np.random.default_rng(9)
    for i in range(6):
        if i % 2 == 0:
            tokens = rng.integers(0, tiny_weights.config.vocab_size, 32)
        else:
            tokens = sample_tokens(tiny_weights, 32, seed=100 + i, temperature=0.7)
        trace = prefill(tiny_weights, tokens)
        trace.window_size = 8
        traces.append(trace)
    return traces
