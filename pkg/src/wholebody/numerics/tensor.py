"""Dense tensors with reverse-mode automatic differentiation.

Data lives in row-major numpy arrays; building an expression records a
tape of parent links and backward closures, and ``backward()`` walks the
graph in reverse topological order accumulating gradients.  Shapes are
checked when the graph is built.  float64 for verification, float32 for
training; the dtype follows the inputs.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)  # own the buffer
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this (typically scalar) node."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward, requires_grad=None) -> Tensor:
    out = Tensor(data)
    out.requires_grad = (any(p.requires_grad for p in parents)
                         if requires_grad is None else requires_grad)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from e


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: a._accumulate(-g) if a.requires_grad else None)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _node(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    if b.data.ndim == 2:
        # x @ W: collapse the batch dims into one GEMM; the weight gradient
        # x^T g comes out already summed over the batch
        k, n = b.shape
        lead = a.shape[:-1]

        def backward(g):
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, k).T @ g2)

        out = (a.data.reshape(-1, k) @ b.data).reshape(lead + (n,))
        return _node(out, (a, b), backward)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(a.data @ b.data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        if a.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            a._accumulate(g * (cdf + x * pdf))

    return _node(x * cdf, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * s).sum(axis=axis, keepdims=True)
            a._accumulate(s * (g - inner))

    return _node(s, (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


def max_reduce(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient flows to the first maximal element."""
    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(idx, axis),
                              np.expand_dims(g, axis), axis=axis)
            a._accumulate(full)

    return _node(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, ax1, ax2))

    return _node(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    widths = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def slice_(a: Tensor, index) -> Tensor:
    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)

    return _node(a.data[index], (a,), backward)


def pad1d(a: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the length axis of a (B, L, C) tensor."""
    if a.data.ndim != 3:
        raise ShapeError(f"pad1d expects (B, L, C), got {a.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, left:g.shape[1] - right if right else None, :])

    return _node(np.pad(a.data, ((0, 0), (left, right), (0, 0))), (a,), backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Temporal convolution: x (B, L, Cin), w (K, Cin, Cout) -> (B, Lout, Cout)."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d expects x (B,L,Cin), w (K,Cin,Cout); got {x.shape}, {w.shape}")
    if x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: channel mismatch {x.shape} vs {w.shape}")
    xp = pad1d(x, *pad) if pad != (0, 0) else x
    k = w.shape[0]
    l_out = (xp.shape[1] - k) // stride + 1
    if l_out < 1:
        raise ShapeError("conv1d: output length < 1")
    taps = []
    for i in range(k):
        sl = slice_(xp, (slice(None), slice(i, i + (l_out - 1) * stride + 1, stride),
                         slice(None)))
        taps.append(matmul(sl, slice_(w, (i,))))
    out = taps[0]
    for t in taps[1:]:
        out = add(out, t)
    if b is not None:
        if b.shape != (w.shape[2],):
            raise ShapeError("conv1d: bias width mismatch")
        out = add(out, b)
    return out


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    idx = np.asarray(indices)

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx.reshape(-1),
                      g.reshape(-1, table.shape[-1]))
            table._accumulate(full)

    return _node(table.data[idx], (table,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not train or p <= 0.0:
        return a
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _node(a.data * mask, (a,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    d = add(a, neg(b))
    return mean(mul(d, d))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift per feature."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layernorm: gamma/beta must match the feature width")
    mu = mean(x, axis=-1, keepdims=True)
    centered = add(x, neg(mu))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(Tensor(np.asarray(1.0, dtype=x.dtype)),
              sqrt(add(var, Tensor(np.asarray(eps, dtype=x.dtype)))))
    return add(mul(mul(centered, inv), gamma), beta)


def groupnorm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
              eps: float = 1e-5) -> Tensor:
    """Group normalization of (B, L, C) over (L, group channels).

    Channels split into ``groups`` contiguous nearly-equal groups, so group
    counts that do not divide C are allowed.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"groupnorm expects (B, L, C), got {x.shape}")
    c = x.shape[2]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("groupnorm: gamma/beta must match channel width")
    bounds = np.cumsum([len(chunk) for chunk in np.array_split(np.arange(c), groups)])
    parts = []
    lo = 0
    one = Tensor(np.asarray(1.0, dtype=x.dtype))
    epst = Tensor(np.asarray(eps, dtype=x.dtype))
    for hi in bounds:
        part = slice_(x, (slice(None), slice(None), slice(lo, hi)))
        flat = reshape(part, (x.shape[0], -1))
        mu = mean(flat, axis=1, keepdims=True)
        centered = add(flat, neg(mu))
        var = mean(mul(centered, centered), axis=1, keepdims=True)
        inv = div(one, sqrt(add(var, epst)))
        parts.append(reshape(mul(centered, inv), part.shape))
        lo = hi
    out = concat(parts, axis=2)
    return add(mul(out, gamma), beta)
