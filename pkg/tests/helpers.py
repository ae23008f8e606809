"""Shared fixtures data and helpers for the test suite."""

import numpy as np

from mcrnet import tensor as T
from mcrnet.data import RawExample
from mcrnet.model import MCRNet, ModelConfig

# every joint sequence here is exactly 12 tokens: [CLS] q [SEP] p [SEP]
TINY_RAWS = [
    RawExample("a", "which key1 was few ?", "key1 few val3 .", [("val3", 9)]),
    RawExample("b", "which key1 was many ?", "key1 few val3 .", [], True),
    RawExample("c", "key2 low ?", "w1 key2 low val5 w2 .", [("val5", 12)]),
]


def relu_margin(fn) -> float:
    """Smallest |pre-activation| over every ReLU evaluated by ``fn()``."""
    seen = []
    orig = T.relu

    def spy(x):
        seen.append(float(np.abs(x.data).min()))
        return orig(x)

    T.relu = spy
    try:
        fn()
    finally:
        T.relu = orig
    return min(seen) if seen else np.inf


def smooth_tiny_model(vocab_size: int, batch, layers: int = 1, steps: int = 2,
                      margin: float = 2e-4) -> MCRNet:
    """First seed whose ReLUs all sit farther than ``margin`` from their kink."""
    for seed in range(50):
        model = MCRNet(ModelConfig(vocab_size, hidden=8, layers=layers, heads=2, max_len=12,
                                   dropout=0.0, steps=steps, init_std=0.3), seed=seed, dtype=np.float64)
        if relu_margin(lambda: model.forward(batch)) > margin:
            return model
    raise RuntimeError("no kink-free seed found")
