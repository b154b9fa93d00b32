"""Small post-layernorm transformer encoder used as the frozen base model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, RangeError

if TYPE_CHECKING:
    from .adapters import AdapterParams, LoraPatch, ModelLayout

PAD_ID = -1
MASK_BIAS = -1e9
INIT_STD = 0.02

LAYER_TENSORS = ("w_q", "w_k", "w_v", "w_o", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
                 "ln1_g", "ln1_b", "ln2_g", "ln2_b")


@dataclass(frozen=True)
class BaseConfig:
    d_model: int = 32
    n_layers: int = 6
    n_heads: int = 4
    d_ff: int = 64
    vocab_size: int = 16
    max_seq_len: int = 16
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "seed":
                if value < 0:
                    raise ConfigError("seed must be non-negative")
            elif value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mask_token(self) -> int:
        """Reserved id used by masked-token pretraining."""
        return self.vocab_size - 1


def base_param_count(cfg: BaseConfig) -> int:
    """Closed-form number of scalar base parameters."""
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 4 * d * d + 2 * d * f + f + d + 4 * d
    return (cfg.vocab_size + cfg.max_seq_len + 2) * d + cfg.n_layers * per_layer + d * cfg.n_classes


def base_tensor_count(cfg: BaseConfig) -> int:
    return 5 + len(LAYER_TENSORS) * cfg.n_layers


PARAM_COUNT_FORMULA = "(vocab_size + max_seq_len + 2)*d + n_layers*(4*d^2 + 2*d*d_ff + d_ff + d + 4*d) + d*n_classes"
TENSOR_COUNT_FORMULA = "5 + 12*n_layers"


@dataclass
class BaseWeights:
    cfg: BaseConfig
    tensors: dict[str, Tensor]
    frozen: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def layer(self, t: int, name: str) -> Tensor:
        return self.tensors[f"layers.{t}.{name}"]

    def names(self) -> list[str]:
        return list(self.tensors)

    def freeze(self) -> "BaseWeights":
        for tensor in self.tensors.values():
            tensor.requires_grad = False
            tensor.grad = None
        self.frozen = True
        return self

    def unfreeze(self) -> "BaseWeights":
        for tensor in self.tensors.values():
            tensor.requires_grad = True
        self.frozen = False
        return self

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def base_tensor_shapes(cfg: BaseConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
    }
    per_layer = {
        "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
        "w_ff1": (d, f), "b_ff1": (f,), "w_ff2": (f, d), "b_ff2": (d,),
        "ln1_g": (d,), "ln1_b": (d,), "ln2_g": (d,), "ln2_b": (d,),
    }
    for t in range(cfg.n_layers):
        for name in LAYER_TENSORS:
            shapes[f"layers.{t}.{name}"] = per_layer[name]
    shapes["head"] = (d, cfg.n_classes)
    return shapes


def base_init(cfg: BaseConfig) -> BaseWeights:
    """Seeded Gaussian(0, 0.02) matrices, zero biases, unit layernorm gains."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape in base_tensor_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b_") or leaf.endswith("_b"):
            data = np.zeros(shape)
        elif leaf.endswith("_g"):
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = Tensor(data)
    return BaseWeights(cfg=cfg, tensors=tensors)


def _pad_bias(pad_mask: np.ndarray | None, b: int, s: int) -> np.ndarray | None:
    if pad_mask is None:
        return None
    bias = np.where(pad_mask, 0.0, MASK_BIAS).reshape(b, 1, 1, s)
    return bias


def attention(h: Tensor, t: int, w: BaseWeights, pad_mask: np.ndarray | None = None,
              lora: "LoraPatch | None" = None) -> Tensor:
    """Bidirectional multi-head self-attention of layer ``t`` (includes W_O)."""
    b, s, d = h.shape
    nh, hd = w.cfg.n_heads, w.cfg.head_dim
    q = h @ w.layer(t, "w_q")
    k = h @ w.layer(t, "w_k")
    v = h @ w.layer(t, "w_v")
    if lora is not None:
        q, v = lora.apply(h, q, v)

    def heads(x: Tensor) -> Tensor:
        return x.reshape(b, s, nh, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    bias = _pad_bias(pad_mask, b, s)
    if bias is not None:
        scores = scores + bias
    probs = ad.softmax(scores)
    ctx = (probs @ vh).transpose(0, 2, 1, 3).reshape(b, s, d)
    return ctx @ w.layer(t, "w_o")


def feed_forward(h: Tensor, t: int, w: BaseWeights) -> Tensor:
    hidden = ad.gelu(h @ w.layer(t, "w_ff1") + w.layer(t, "b_ff1"))
    return hidden @ w.layer(t, "w_ff2") + w.layer(t, "b_ff2")


def layer_forward(h: Tensor, t: int, w: BaseWeights, pad_mask: np.ndarray | None = None,
                  lora: "LoraPatch | None" = None) -> Tensor:
    """One post-LN block: LN(h + MHSA(h)) then LN(h1 + FFN(h1))."""
    cfg = w.cfg
    if not 0 <= t < cfg.n_layers:
        raise RangeError(f"layer index {t} outside [0, {cfg.n_layers})")
    if h.ndim != 3 or h.shape[-1] != cfg.d_model:
        raise DimensionError(f"layer input must be [b, s, {cfg.d_model}], got {h.shape}")
    if h.shape[1] > cfg.max_seq_len:
        raise RangeError(f"sequence length {h.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    h1 = ad.layernorm(h + attention(h, t, w, pad_mask, lora), w.layer(t, "ln1_g"), w.layer(t, "ln1_b"))
    return ad.layernorm(h1 + feed_forward(h1, t, w), w.layer(t, "ln2_g"), w.layer(t, "ln2_b"))


def check_tokens(tokens: np.ndarray, cfg: BaseConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise DimensionError(f"tokens must be integers, got {tokens.dtype}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise RangeError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and tokens.max() >= cfg.vocab_size:
        raise RangeError(f"token id {int(tokens.max())} >= vocab_size {cfg.vocab_size}")
    if tokens.size and tokens.min() < PAD_ID:
        raise RangeError(f"token id {int(tokens.min())} is negative and not the pad id {PAD_ID}")
    pad = tokens != PAD_ID
    if tokens.size and not pad.any(axis=1).all():
        raise RangeError("every sequence needs at least one non-pad token")
    return pad


def embed(tokens: np.ndarray, w: BaseWeights) -> tuple[Tensor, np.ndarray]:
    """Layer-normalized token plus position embeddings, and the non-pad mask."""
    pad_mask = check_tokens(tokens, w.cfg)
    ids = np.where(pad_mask, tokens, 0)
    s = tokens.shape[1]
    h = ad.embedding_lookup(w["tok_emb"], ids) + ad.embedding_lookup(w["pos_emb"], np.arange(s))
    return ad.layernorm(h, w["emb_ln_g"], w["emb_ln_b"]), pad_mask


def mean_pool(h: Tensor, pad_mask: np.ndarray) -> Tensor:
    m = pad_mask.astype(h.data.dtype)
    counts = m.sum(axis=1, keepdims=True)
    return (h * m[:, :, None]).sum(axis=1) * (1.0 / counts)


def encode(tokens: np.ndarray, w: BaseWeights, layout: "ModelLayout | None" = None,
           adapters: "AdapterParams | None" = None,
           capture: dict | None = None) -> tuple[Tensor, np.ndarray]:
    """Final hidden states after all layers, with adapters applied per layout.

    ``capture``, when given, receives the input hidden states of each LoR2C
    module keyed by module id.
    """
    from .adapters import lor2c_span_forward, lora_qv_forward_patch

    h, pad_mask = embed(tokens, w)
    L = w.cfg.n_layers
    if layout is None or not layout.modules:
        for t in range(L):
            h = layer_forward(h, t, w, pad_mask)
        return h, pad_mask
    layout.validate(L)
    by_layer = layout.layer_map()
    t = 0
    while t < L:
        module = by_layer.get(t)
        if module is not None and module.is_residual:
            if capture is not None:
                capture[module.id] = h
            h = lor2c_span_forward(h, module, w, adapters, pad_mask)
            t = module.span_start + module.span_len
            continue
        patch = None
        if module is not None and module.kind == "lora_qv":
            patch = lora_qv_forward_patch(module, t, adapters)
        h = layer_forward(h, t, w, pad_mask, patch)
        t += 1
    return h, pad_mask


def model_forward(tokens: np.ndarray, layout: "ModelLayout | None", w: BaseWeights,
                  adapters: "AdapterParams | None" = None, capture: dict | None = None) -> Tensor:
    """Class logits ``[batch, n_classes]`` from mean-pooled final hidden states."""
    h, pad_mask = encode(tokens, w, layout, adapters, capture)
    return mean_pool(h, pad_mask) @ w["head"]


def mlm_logits(tokens: np.ndarray, positions: np.ndarray, w: BaseWeights) -> Tensor:
    """Vocabulary logits at flattened ``positions`` via the tied token embedding."""
    h, _ = encode(tokens, w)
    flat = h.reshape(-1, w.cfg.d_model)
    picked = ad.embedding_lookup(flat, positions)
    return picked @ w["tok_emb"].T
