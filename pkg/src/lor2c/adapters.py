"""
Trainable low-rank structures attached to the frozen base.

Three module kinds:

* ``lora_qv``      additive low-rank update on one layer's W_Q and W_V.
* ``lor2c``        low-rank bypass ``h_in @ B @ A`` around one or more whole
                   layers (a span); merged modules have ``span_len > 1``.
* ``shared_lor2c`` single-layer bypass whose down-projection A is one tensor
                   shared by every shared module; each layer owns its B.

A is ``[r, d]`` and B is ``[d, r]``; the update is applied on activations as
``(h @ B) @ A`` so the dense ``d x d`` product is never formed.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, LayoutError

log = logging.getLogger(__name__)

KINDS = ("lora_qv", "lor2c", "shared_lor2c")
METHODS = ("lora", "lor2c", "sharelor2c", "imlor2c")
ADAPTER_INIT_STD = 0.02
SHARED_A = "shared.A"


@dataclass(frozen=True)
class AdapterModule:
    kind: str
    rank: int
    span_start: int
    span_len: int = 1
    scaling: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LayoutError(f"unknown adapter kind {self.kind!r}")
        if self.rank < 1:
            raise LayoutError(f"rank must be >= 1, got {self.rank}")
        if self.span_start < 0 or self.span_len < 1:
            raise LayoutError(f"bad span start={self.span_start} len={self.span_len}")
        if self.kind != "lor2c" and self.span_len != 1:
            raise LayoutError(f"{self.kind} modules cover exactly one layer")

    @property
    def span_end(self) -> int:
        """Last covered layer, inclusive."""
        return self.span_start + self.span_len - 1

    @property
    def layers(self) -> range:
        return range(self.span_start, self.span_start + self.span_len)

    @property
    def is_residual(self) -> bool:
        return self.kind in ("lor2c", "shared_lor2c")

    @property
    def id(self) -> str:
        prefix = {"lora_qv": "lora", "lor2c": "lor2c", "shared_lor2c": "share"}[self.kind]
        if self.span_len == 1:
            return f"{prefix}:{self.span_start}"
        return f"{prefix}:{self.span_start}-{self.span_end}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rank": self.rank, "span_start": self.span_start,
                "span_len": self.span_len, "scaling": self.scaling}

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterModule":
        return cls(kind=d["kind"], rank=int(d["rank"]), span_start=int(d["span_start"]),
                   span_len=int(d.get("span_len", 1)), scaling=float(d.get("scaling", 1.0)))


def Lor2c(rank: int, span_start: int, span_len: int = 1, scaling: float = 1.0) -> AdapterModule:
    return AdapterModule("lor2c", rank, span_start, span_len, scaling)


def SharedLor2c(rank: int, layer: int, scaling: float = 1.0) -> AdapterModule:
    return AdapterModule("shared_lor2c", rank, layer, 1, scaling)


def LoraQV(rank: int, layer: int, scaling: float = 1.0) -> AdapterModule:
    return AdapterModule("lora_qv", rank, layer, 1, scaling)


@dataclass(frozen=True)
class ModelLayout:
    """Ordered adapter modules; at most one module per layer."""

    modules: tuple[AdapterModule, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "modules", tuple(sorted(self.modules, key=lambda m: m.span_start)))

    def validate(self, n_layers: int) -> "ModelLayout":
        covered: set[int] = set()
        for m in self.modules:
            if m.span_start + m.span_len > n_layers:
                raise LayoutError(f"module {m.id} extends past layer {n_layers - 1}")
            overlap = covered.intersection(m.layers)
            if overlap:
                raise LayoutError(f"module {m.id} overlaps layers {sorted(overlap)}")
            covered.update(m.layers)
        shared_ranks = {m.rank for m in self.modules if m.kind == "shared_lor2c"}
        if len(shared_ranks) > 1:
            raise LayoutError("shared modules must agree on rank (one A tensor)")
        return self

    def layer_map(self) -> dict[int, AdapterModule]:
        return {t: m for m in self.modules for t in m.layers}

    def by_id(self, module_id: str) -> AdapterModule:
        for m in self.modules:
            if m.id == module_id:
                return m
        raise LayoutError(f"no module {module_id!r} in layout")

    def residual_modules(self) -> list[AdapterModule]:
        return [m for m in self.modules if m.is_residual]

    def lor2c_modules(self) -> list[AdapterModule]:
        return [m for m in self.modules if m.kind == "lor2c"]

    def injected_layers(self) -> set[int]:
        return {m.span_start for m in self.modules if m.kind == "lora_qv"}

    def replace_modules(self, remove: list[AdapterModule], add: list[AdapterModule]) -> "ModelLayout":
        kept = [m for m in self.modules if m not in remove]
        return ModelLayout(tuple(kept + list(add)))

    def to_dict(self) -> list[dict]:
        return [m.to_dict() for m in self.modules]

    @classmethod
    def from_dict(cls, items: list[dict]) -> "ModelLayout":
        return cls(tuple(AdapterModule.from_dict(d) for d in items))

    def describe(self) -> str:
        return " ".join(m.id for m in self.modules) or "(none)"


def layout_for_method(method: str, n_layers: int, rank: int, scaling: float = 1.0,
                      lora_alpha: float | None = None) -> ModelLayout:
    """Initial layout: one module per layer of the method's kind.

    ``imlor2c`` starts from plain LoR2C; restructuring happens during training.
    LoRA scaling is ``lora_alpha / rank`` with alpha defaulting to the rank.
    """
    if method == "lora":
        s = (lora_alpha if lora_alpha is not None else rank) / rank
        mods = [LoraQV(rank, t, s) for t in range(n_layers)]
    elif method in ("lor2c", "imlor2c"):
        mods = [Lor2c(rank, t, 1, scaling) for t in range(n_layers)]
    elif method == "sharelor2c":
        mods = [SharedLor2c(rank, t, scaling) for t in range(n_layers)]
    else:
        raise LayoutError(f"unknown method {method!r}; expected one of {METHODS}")
    return ModelLayout(tuple(mods))


@dataclass
class AdapterParams:
    """Named trainable tensors. Shared modules all point at one A tensor."""

    d_model: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def factors(self, module: AdapterModule) -> tuple[Tensor, Tensor]:
        """(A, B) of a residual module."""
        if module.kind == "lor2c":
            return self.tensors[f"{module.id}.A"], self.tensors[f"{module.id}.B"]
        if module.kind == "shared_lor2c":
            return self.tensors[SHARED_A], self.tensors[f"{module.id}.B"]
        raise ContractError(f"module {module.id} has no residual factors")

    def module_tensors(self, module: AdapterModule) -> dict[str, Tensor]:
        if module.kind == "lora_qv":
            return {f"{module.id}.{n}": self.tensors[f"{module.id}.{n}"] for n in ("A_q", "B_q", "A_v", "B_v")}
        if module.kind == "lor2c":
            return {f"{module.id}.{n}": self.tensors[f"{module.id}.{n}"] for n in ("A", "B")}
        return {SHARED_A: self.tensors[SHARED_A], f"{module.id}.B": self.tensors[f"{module.id}.B"]}

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def named(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.d_model, {k: Tensor(v.data, requires_grad=v.requires_grad)
                                            for k, v in self.tensors.items()})


def _gaussian(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(0.0, ADAPTER_INIT_STD, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_module(params: AdapterParams, module: AdapterModule, rng: np.random.Generator) -> None:
    """Add fresh factors for ``module``: A Gaussian(0, 0.02), B zero."""
    d, r = params.d_model, module.rank
    if module.kind == "lora_qv":
        params.tensors[f"{module.id}.A_q"] = _gaussian(rng, (r, d))
        params.tensors[f"{module.id}.B_q"] = _zeros((d, r))
        params.tensors[f"{module.id}.A_v"] = _gaussian(rng, (r, d))
        params.tensors[f"{module.id}.B_v"] = _zeros((d, r))
    elif module.kind == "lor2c":
        params.tensors[f"{module.id}.A"] = _gaussian(rng, (r, d))
        params.tensors[f"{module.id}.B"] = _zeros((d, r))
    else:
        if SHARED_A not in params.tensors:
            params.tensors[SHARED_A] = _gaussian(rng, (r, d))
        params.tensors[f"{module.id}.B"] = _zeros((d, r))


def remove_module(params: AdapterParams, module: AdapterModule) -> None:
    for name in module_tensor_names(module):
        params.tensors.pop(name, None)


def module_tensor_names(module: AdapterModule) -> list[str]:
    if module.kind == "lora_qv":
        return [f"{module.id}.{n}" for n in ("A_q", "B_q", "A_v", "B_v")]
    if module.kind == "lor2c":
        return [f"{module.id}.A", f"{module.id}.B"]
    return [f"{module.id}.B"]


def adapter_init(layout: ModelLayout, d_model: int, seed: int) -> AdapterParams:
    params = AdapterParams(d_model)
    rng = np.random.default_rng(seed)
    for m in layout.modules:
        init_module(params, m, rng)
    return params


def lor2c_span_forward(h_in: Tensor, module: AdapterModule, w, adapters: AdapterParams,
                       pad_mask: np.ndarray | None = None) -> Tensor:
    """Base layers of the span in sequence, plus ``s * (h_in @ B) @ A`` from the span input."""
    from .transformer import layer_forward

    if not module.is_residual:
        raise LayoutError(f"module {module.id} is not a residual module")
    if module.span_start + module.span_len > w.cfg.n_layers:
        raise LayoutError(f"span of {module.id} exceeds {w.cfg.n_layers} layers")
    A, B = adapters.factors(module)
    x = h_in
    for t in module.layers:
        x = layer_forward(x, t, w, pad_mask)
    return x + ((h_in @ B) @ A) * module.scaling


@dataclass
class LoraPatch:
    A_q: Tensor
    B_q: Tensor
    A_v: Tensor
    B_v: Tensor
    scaling: float

    def apply(self, h: Tensor, q: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        q = q + ((h @ self.B_q) @ self.A_q) * self.scaling
        v = v + ((h @ self.B_v) @ self.A_v) * self.scaling
        return q, v

    def effective(self, w_q: np.ndarray, w_v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``W + s * B @ A`` for inspection."""
        return (w_q + self.scaling * self.B_q.data @ self.A_q.data,
                w_v + self.scaling * self.B_v.data @ self.A_v.data)


def lora_qv_forward_patch(module: AdapterModule, t: int, adapters: AdapterParams) -> LoraPatch:
    if module.kind != "lora_qv" or module.span_start != t:
        raise LayoutError(f"module {module.id} is not a LoRA patch for layer {t}")
    p = adapters.module_tensors(module)
    mid = module.id
    return LoraPatch(p[f"{mid}.A_q"], p[f"{mid}.B_q"], p[f"{mid}.A_v"], p[f"{mid}.B_v"], module.scaling)


def param_count(layout: ModelLayout, d: int, n_layers: int | None = None) -> dict[str, int]:
    """Exact trainable scalar counts per kind plus ``total``."""
    if n_layers is not None:
        layout.validate(n_layers)
    counts = Counter({k: 0 for k in KINDS})
    shared_rank = None
    for m in layout.modules:
        if m.kind == "lora_qv":
            counts["lora_qv"] += 4 * d * m.rank
        elif m.kind == "lor2c":
            counts["lor2c"] += 2 * d * m.rank
        else:
            counts["shared_lor2c"] += d * m.rank
            shared_rank = m.rank
    if shared_rank is not None:
        counts["shared_lor2c"] += d * shared_rank
    out = dict(counts)
    out["total"] = sum(counts.values())
    return out


def injection_rank(rank: int) -> int:
    """Half the LoR2C rank; odd ranks round up and break exact conservation."""
    r_inj = math.ceil(rank / 2)
    if rank % 2:
        log.warning("odd rank %d injected as rank %d: parameter count changes by %+d*d",
                    rank, r_inj, 4 * r_inj - 2 * rank)
    return r_inj

