"""
Dense tensors with reverse-mode automatic differentiation.

Every primitive computes its forward value with numpy and, when any input
requires a gradient, attaches a closure that pushes the output gradient back
to its inputs. ``backward`` topologically sorts the graph reachable from a
scalar loss and visits each node once.

    x = Tensor(np.ones((2, 3)), requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    x.grad  # 2 * x
"""

from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, RangeError

DEFAULT_DTYPE = np.float64
LAYERNORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (current context only)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str, backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(_as_tensor(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else _axis_count(self.shape, axis)
        return scale(tsum(self, axis=axis, keepdims=keepdims), 1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise DimensionError(f".T needs a 2-d tensor, got shape {self.shape}")
        return transpose(self, (1, 0))

    def backward(self, leaves: Iterable["Tensor"] | None = None) -> None:
        backward(self, leaves=leaves)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _axis_count(shape, axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return Tensor._result(out_data, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._result(out_data, (a, b), "mul", bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), "neg", lambda g: _accum(a, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), "scale", lambda g: _accum(a, g * c))


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def bw(g):
        _accum(a, -g * out_data * out_data)

    return Tensor._result(out_data, (a,), "reciprocal", bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return Tensor._result(np.asarray(out_data), (a,), "sum", bw)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out_data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return Tensor._result(out_data, (a,), "reshape", lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), "transpose", lambda g: _accum(a, g.transpose(inv)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions of ``a`` broadcast against a 2-d ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            _accum(b, gb)

    return Tensor._result(out_data, (a, b), "matmul", bw)


# ---------------------------------------------------------------------------
# neural-network primitives


def softmax(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise DimensionError("softmax over a zero-length last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return Tensor._result(p, (x,), "softmax", bw)


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last dimension, then apply the optional affine pair."""
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layernorm over a zero-length last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def bw(g):
        gx = g * gamma.data if gamma is not None else g
        if x.requires_grad:
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))
        if gamma is not None and gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0).reshape(gamma.shape))
        if beta is not None and beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0).reshape(beta.shape))

    return Tensor._result(out, parents, "layernorm", bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner))

    return Tensor._result(out, (x,), "gelu", bw)


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    """Gather rows of a 2-d ``weight`` by integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {weight.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embedding ids must be integers, got dtype {ids.dtype}")
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)].ravel()[0]
        raise RangeError(f"index {int(bad)} out of range for table of {n} rows")
    out = weight.data[ids]

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.ravel(), g.reshape(-1, weight.shape[1]))
        _accum(weight, gw)

    return Tensor._result(out, (weight,), "embedding", bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[n, classes]`` against integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n, classes] logits, got {logits.shape}")
    n, c = logits.shape
    if c == 0:
        raise DimensionError("cross_entropy over zero classes")
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise RangeError(f"label {int(bad)} out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        _accum(logits, p * (float(g) / n))

    return Tensor._result(np.asarray(loss), (logits,), "cross_entropy", bw)


_PRIMITIVES = {
    "softmax_lastdim": softmax,
    "layernorm_lastdim": layernorm,
    "gelu": gelu,
    "embedding_lookup": embedding_lookup,
    "cross_entropy": cross_entropy,
    "add": add,
    "scale": scale,
}


def nn_primitive(kind: str, x, *args, **kwargs) -> Tensor:
    """Dispatch one of the named primitives by ``kind``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}; known: {sorted(_PRIMITIVES)}") from None
    x = _as_tensor(x)
    if x.ndim and x.shape[-1] == 0:
        raise DimensionError(f"{kind} over a zero-length last dimension")
    return fn(x, *args, **kwargs)


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class GradGraph:
    """Nodes reachable from an output, inputs before consumers."""

    nodes: list[Tensor]
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "GradGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        leaves = [n for n in order if n.is_leaf and n.requires_grad]
        return cls(nodes=order, leaves=leaves)


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None,
             graph: GradGraph | None = None) -> GradGraph:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients are overwritten, not accumulated. Leaves passed explicitly but
    not reachable from ``loss`` receive zeros.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph or GradGraph.from_output(loss)
    for node in graph.nodes:
        node.grad = None
    explicit = list(leaves) if leaves is not None else []
    for leaf in explicit:
        leaf.grad = np.zeros_like(leaf.data)
    for leaf in graph.leaves:
        leaf.grad = np.zeros_like(leaf.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        if not node.is_leaf:
            node.grad = None
    for leaf in graph.leaves:
        if not np.all(np.isfinite(leaf.grad)):
            raise NumericError(f"non-finite gradient on leaf {leaf!r}")
    return graph


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over all entries of ``params``.

    ``f`` must rebuild its graph from the current ``params`` data on every call.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    loss = f()
    backward(loss, leaves=params)
    analytic = [np.array(p.grad, copy=True) for p in params]
    worst = 0.0
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                up = f().item()
                flat[j] = orig - eps
                down = f().item()
                flat[j] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericError(f"non-finite loss perturbing param {pi} entry {j}")
                numeric = (up - down) / (2 * eps)
                a = analytic[pi].reshape(-1)[j]
                if not math.isfinite(a):
                    raise NumericError(f"non-finite analytic grad at param {pi} entry {j}")
                worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
