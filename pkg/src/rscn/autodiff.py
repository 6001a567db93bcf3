"""Tape-style reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive builds a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients. ``backward``
walks the graph once in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    """Raised when a primitive receives operands of non-conforming shape."""


def _shape_error(op: str, *shapes) -> ShapeError:
    shown = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {shown}")


class Tensor:
    __slots__ = ("data", "grad", "op", "parents", "requires_grad", "name", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.shape})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.name = None
    out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    # Only trailing-aligned broadcasting (row vector against matrix, scalar against anything).
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def fn(g):
        g2 = g.reshape(ad.shape[:-1] + bd.shape[1:])
        ga = g2 @ bd.T if bd.ndim == 2 else np.multiply.outer(g2, bd)
        if ad.ndim == 2:
            gb = ad.T @ g2
        else:
            gb = np.multiply.outer(ad, g2) if bd.ndim == 2 else ad * g2
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def softplus(a: Tensor) -> Tensor:
    z = a.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return _make(out, "softplus", (a,), lambda g: (g * _stable_sigmoid(z),))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), "sum", (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    return _make(a.data.sum(axis=axis), "sum", (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if a.data.size == 0:
        raise _shape_error("mean", a.shape)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, "concat", tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    rows = [reshape(t, (1,) + t.shape) for t in tensors]
    return concat(rows, axis=0)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", src, shape) from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise _shape_error("transpose", a.shape)
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T.copy(),))


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Slice ``a`` along ``axis`` with an integer index, slice or index array."""
    shape = a.shape
    try:
        out = np.take(a.data, np.arange(shape[axis])[index], axis=axis)
    except IndexError:
        raise _shape_error("take", shape, np.shape(index)) from None

    def fn(g):
        full = np.zeros(shape)
        idx = [slice(None)] * len(shape)
        idx[axis] = np.arange(shape[axis])[index]
        np.add.at(full, tuple(idx), g)
        return (full,)

    return _make(out, "take", (a,), fn)


def pick(a: Tensor, cols: np.ndarray) -> Tensor:
    """Gather ``a[i, cols[i]]`` for each row i of a matrix."""
    cols = np.asarray(cols, dtype=int)
    if a.data.ndim != 2 or cols.shape != (a.shape[0],):
        raise _shape_error("pick", a.shape, cols.shape)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _make(a.data[rows, cols], "pick", (a,), fn)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax along the last axis, max-shifted for stability."""
    z = a.data
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _make(out, "log_softmax", (a,),
                 lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity on the forward pass; scales the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ValueError(f"grad_reverse: lambda must be >= 0, got {lam}")
    return _make(x.data, "grad_reverse", (x,), lambda g: (_reverse(g, lam),))


def _reverse(g: np.ndarray, lam: float) -> np.ndarray:
    return -lam * g


def l2_normalize(x: Tensor, eps: float = EPS) -> Tensor:
    """x / max(||x||_2, eps). The zero vector maps to itself."""
    xd = x.data
    norm = float(np.sqrt(np.dot(xd, xd))) if xd.ndim == 1 else None
    if norm is None:
        raise _shape_error("l2_normalize", x.shape)
    denom = max(norm, eps)
    out = xd / denom

    def fn(g):
        if norm > eps:
            return ((g - out * np.dot(out, g)) / denom,)
        return (g / denom,)

    return _make(out, "l2_normalize", (x,), fn)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.data.ndim != 1:
        raise _shape_error("dot", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(np.asarray(np.sum(ad * bd)), "dot", (a, b), lambda g: (g * bd, g * ad))


# --------------------------------------------------------------------------- composites


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("cosine_similarity", a.shape, b.shape)
    return dot(l2_normalize(a), l2_normalize(b))


def bce_with_logits(logit: Tensor, target: int) -> Tensor:
    """Binary cross-entropy on a raw logit: softplus(-z) for t=1, softplus(z) for t=0."""
    if target not in (0, 1):
        raise ValueError(f"bce_with_logits: target must be 0 or 1, got {target}")
    return softplus(-logit) if target == 1 else softplus(logit)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    if logits.data.ndim != 1:
        raise _shape_error("softmax_cross_entropy", logits.shape)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"softmax_cross_entropy: label {label} outside [0, {logits.shape[0] - 1}]")
    return -take(log_softmax(logits), label)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "abs": abs_,
    "mean": mean,
    "sum": sum_,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": take,
    "transpose": transpose,
    "scale": scale,
    "log_softmax": log_softmax,
    "l2_normalize": l2_normalize,
    "dot": dot,
    "grad_reverse": grad_reverse,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf with requires_grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# --------------------------------------------------------------------------- layers


@dataclass
class LinearLayer:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator,
             name: str = "linear") -> "LinearLayer":
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=(fan_out,))
        return cls(Tensor(w, requires_grad=True, name=f"{name}.weight"),
                   Tensor(b, requires_grad=True, name=f"{name}.bias"))

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise _shape_error("linear", x.shape, self.weight.shape)
        return add(matmul(x, self.weight), self.bias)


def mlp_forward(layers: Sequence[LinearLayer], x: Tensor) -> Tensor:
    """ReLU between layers, none after the last."""
    h = x
    for i, layer in enumerate(layers):
        h = layer(h)
        if i < len(layers) - 1:
            h = relu(h)
    return h


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, name: str) -> list[LinearLayer]:
    return [LinearLayer.init(a, b, rng, name=f"{name}.{i}")
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
