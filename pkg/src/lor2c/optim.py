"""AdamW with decoupled weight decay, keyed by parameter name."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import Tensor
from .errors import NumericError


@dataclass
class AdamState:
    step: dict[str, int] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def drop_missing(self, names: Iterable[str]) -> None:
        keep = set(names)
        for table in (self.step, self.m, self.v):
            for k in [k for k in table if k not in keep]:
                del table[k]


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """In-place bias-corrected AdamW update of every array in ``params``."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradients for {bad}")
    b1, b2 = betas
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.step[name] = 0
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.step[name] += 1
        t = state.step[name]
        m, v = state.m[name], state.v[name]
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step_size = lr / (1 - b1 ** t)
        denom = np.sqrt(v / (1 - b2 ** t)) + eps
        p -= step_size * m / denom


class AdamW:
    def __init__(self, named: Iterable[tuple[str, Tensor]], lr: float = 4e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()
        self.set_params(named)

    def set_params(self, named: Iterable[tuple[str, Tensor]]) -> None:
        """Swap the parameter set; state survives for names that persist."""
        self.named = list(named)
        self.state.drop_missing(n for n, _ in self.named)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        params = {n: t.data for n, t in self.named}
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.named}
        if not math.isfinite(lr):
            raise NumericError(f"learning rate {lr} is not finite")
        adamw_step(params, grads, self.state, lr, self.betas, self.eps, self.weight_decay)
