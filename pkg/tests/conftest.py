import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lor2c.adapters import adapter_init, layout_for_method  # noqa: E402
from lor2c.transformer import BaseConfig, base_init  # noqa: E402

TINY = BaseConfig(d_model=8, n_layers=3, n_heads=2, d_ff=12, vocab_size=7, max_seq_len=6, n_classes=2, seed=3)


def randomized_base(cfg: BaseConfig, std: float = 0.3, seed: int = 0):
    """Frozen base with weights large enough that every path matters."""
    w = base_init(cfg)
    rng = np.random.default_rng(seed)
    for name, t in w.tensors.items():
        if name.endswith("_g"):
            t.data = 1.0 + rng.normal(0.0, 0.1, size=t.shape)
        else:
            t.data = rng.normal(0.0, std, size=t.shape)
    return w.freeze()


def randomize_adapters(adapters, std: float = 0.3, seed: int = 1):
    rng = np.random.default_rng(seed)
    for t in adapters.trainable():
        t.data = rng.normal(0.0, std, size=t.shape)
    return adapters


def probe_tokens(cfg: BaseConfig, b: int = 3, s: int | None = None, seed: int = 5, pad_last: bool = True):
    s = s or cfg.max_seq_len
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, cfg.vocab_size, size=(b, s))
    if pad_last and s > 1:
        toks[-1, -2:] = -1
    return toks


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_base():
    return randomized_base(TINY)


@pytest.fixture
def tiny_tokens():
    return probe_tokens(TINY)


def method_params(method, cfg, rank=2, seed=0, randomize=True):
    layout = layout_for_method(method, cfg.n_layers, rank).validate(cfg.n_layers)
    params = adapter_init(layout, cfg.d_model, seed)
    if randomize:
        randomize_adapters(params)
    return layout, params
