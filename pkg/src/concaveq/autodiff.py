"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The graph is rebuilt on every forward pass (define-by-run).  Each operation
returns a :class:`Node` holding the forward value and a closure that
accumulates vector-Jacobian products into its parents.  ``backward`` walks the
ancestors of a scalar loss in reverse creation order, which is a valid
topological order and makes two backward passes over the same graph
bitwise-identical.

Subgradient conventions: relu'(0) = 0 and d|x|/dx at 0 = 0.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_NODE_IDS = itertools.count()


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "_id")

    def __init__(self, value: np.ndarray, parents: tuple = (), vjp=None):
        self.value = value
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp
        self._id = next(_NODE_IDS)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, id={self._id})"


def as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def constant(x) -> Node:
    """Leaf node that participates in the forward pass only."""
    return Node(as_array(x))


def parameter(x) -> Node:
    """Leaf node whose gradient is retained across backward()."""
    return Node(np.array(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += _unbroadcast(g, node.value.shape)


class ShapeError(ValueError):
    """Incompatible operand shapes for a graph operation."""


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    out = Node(a.value + b.value, (a, b))

    def vjp(g):
        _accum(a, g)
        _accum(b, g)

    out._vjp = vjp
    return out


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    out = Node(a.value - b.value, (a, b))

    def vjp(g):
        _accum(a, g)
        _accum(b, -g)

    out._vjp = vjp
    return out


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    out = Node(a.value * b.value, (a, b))

    def vjp(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    out._vjp = vjp
    return out


def neg(a) -> Node:
    a = _lift(a)
    out = Node(-a.value, (a,))
    out._vjp = lambda g: _accum(a, -g)
    return out


def scale(a, c: float) -> Node:
    a = _lift(a)
    c = float(c)
    out = Node(a.value * c, (a,))
    out._vjp = lambda g: _accum(a, g * c)
    return out


def square(a) -> Node:
    a = _lift(a)
    out = Node(a.value * a.value, (a,))
    out._vjp = lambda g: _accum(a, 2.0 * a.value * g)
    return out


def relu(a) -> Node:
    a = _lift(a)
    mask = a.value > 0.0
    out = Node(np.where(mask, a.value, 0.0), (a,))
    out._vjp = lambda g: _accum(a, g * mask)
    return out


def absval(a) -> Node:
    a = _lift(a)
    s = np.sign(a.value)  # sign(0) = 0, matching the chosen subgradient
    out = Node(np.abs(a.value), (a,))
    out._vjp = lambda g: _accum(a, g * s)
    return out


def log(a) -> Node:
    a = _lift(a)
    out = Node(np.log(a.value), (a,))
    out._vjp = lambda g: _accum(a, g / a.value)
    return out


def exp(a) -> Node:
    a = _lift(a)
    ev = np.exp(a.value)
    out = Node(ev, (a,))
    out._vjp = lambda g: _accum(a, g * ev)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def affine(x, w, b) -> Node:
    """x @ w.T + b with w of shape (out, in) and b of shape (out,)."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if w.value.ndim != 2 or x.value.shape[-1] != w.value.shape[1]:
        raise ShapeError(
            f"affine: x{x.value.shape} incompatible with w{w.value.shape}")
    if b.value.shape != (w.value.shape[0],):
        raise ShapeError(
            f"affine: b{b.value.shape} incompatible with w{w.value.shape}")
    out = Node(x.value @ w.value.T + b.value, (x, w, b))

    def vjp(g):
        _accum(x, g @ w.value)
        gx = g.reshape(-1, g.shape[-1])
        xv = x.value.reshape(-1, x.value.shape[-1])
        _accum(w, gx.T @ xv)
        _accum(b, gx.sum(axis=0))

    out._vjp = vjp
    return out


def bmatvec(w, x) -> Node:
    """Per-item matrix-vector product.

    w has shape (B, out, in); x has shape (B, in) or (B, C, in) with a shared
    weight per item across candidates C.  Result: (B, out) or (B, C, out).
    """
    w, x = _lift(w), _lift(x)
    if w.value.ndim != 3 or x.value.shape[-1] != w.value.shape[2]:
        raise ShapeError(
            f"bmatvec: w{w.value.shape} incompatible with x{x.value.shape}")
    if x.value.ndim == 2:
        val = np.matmul(w.value, x.value[:, :, None])[:, :, 0]
        out = Node(val, (w, x))

        def vjp(g):
            _accum(w, g[:, :, None] * x.value[:, None, :])
            _accum(x, np.matmul(g[:, None, :], w.value)[:, 0, :])

        out._vjp = vjp
        return out
    if x.value.ndim == 3:
        val = np.einsum("boi,bci->bco", w.value, x.value)
        out = Node(val, (w, x))

        def vjp(g):
            _accum(w, np.einsum("bco,bci->boi", g, x.value))
            _accum(x, np.einsum("bco,boi->bci", g, w.value))

        out._vjp = vjp
        return out
    raise ShapeError(f"bmatvec: unsupported x rank {x.value.ndim}")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def concat(nodes: Sequence, axis: int = -1) -> Node:
    ns = [_lift(n) for n in nodes]
    out = Node(np.concatenate([n.value for n in ns], axis=axis), tuple(ns))
    sizes = [n.value.shape[axis] for n in ns]

    def vjp(g):
        offs = np.cumsum([0] + sizes)
        for n, lo, hi in zip(ns, offs[:-1], offs[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            _accum(n, g[tuple(idx)])

    out._vjp = vjp
    return out


def slice_last(a, start: int, stop: int) -> Node:
    a = _lift(a)
    out = Node(a.value[..., start:stop], (a,))

    def vjp(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        _accum(a, full)

    out._vjp = vjp
    return out


def reshape(a, shape: tuple) -> Node:
    a = _lift(a)
    out = Node(a.value.reshape(shape), (a,))
    out._vjp = lambda g: _accum(a, g.reshape(a.value.shape))
    return out


def take_last(a, idx) -> Node:
    """Gather one entry along the last axis; idx has shape a.shape[:-1]."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != a.value.shape[:-1]:
        raise ShapeError(
            f"take_last: idx{idx.shape} incompatible with a{a.value.shape}")
    out = Node(np.take_along_axis(a.value, idx[..., None], -1)[..., 0], (a,))

    def vjp(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, idx[..., None], g[..., None], -1)
        _accum(a, full)

    out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# reductions and softmax
# ---------------------------------------------------------------------------

def sum_all(a) -> Node:
    a = _lift(a)
    out = Node(np.asarray(a.value.sum()), (a,))
    out._vjp = lambda g: _accum(a, np.broadcast_to(g, a.value.shape))
    return out


def sum_axis(a, axis: int, keepdims: bool = False) -> Node:
    a = _lift(a)
    out = Node(a.value.sum(axis=axis, keepdims=keepdims), (a,))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape))

    out._vjp = vjp
    return out


def mean_all(a) -> Node:
    a = _lift(a)
    return scale(sum_all(a), 1.0 / a.value.size)


def softmax(a) -> Node:
    """Softmax over the last axis."""
    a = _lift(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    s = ez / ez.sum(axis=-1, keepdims=True)
    out = Node(s, (a,))

    def vjp(g):
        _accum(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    out._vjp = vjp
    return out


def log_softmax(a) -> Node:
    """Numerically stable log-softmax over the last axis."""
    a = _lift(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Node(z - lse, (a,))
    s = np.exp(z - lse)

    def vjp(g):
        _accum(a, g - s * g.sum(axis=-1, keepdims=True))

    out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Node) -> None:
    """Populate gradients for every ancestor of a scalar loss node.

    Nodes not connected to the loss keep grad = None (exactly zero).
    """
    if loss.value.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.value.shape}")
    seen = {loss._id}
    stack = [loss]
    nodes = []
    while stack:
        n = stack.pop()
        nodes.append(n)
        for p in n._parents:
            if p._id not in seen:
                seen.add(p._id)
                stack.append(p)
    nodes.sort(key=lambda n: n._id, reverse=True)
    loss.grad = np.ones_like(loss.value)
    for n in nodes:
        if n._vjp is not None and n.grad is not None:
            n._vjp(n.grad)


def grad(node: Node) -> np.ndarray:
    """Gradient of a node after backward(); zeros if disconnected."""
    if node.grad is None:
        return np.zeros_like(node.value)
    return node.grad


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

class GradCheckError(RuntimeError):
    pass


class GradCheckReport:
    """Per-tensor worst relative error between analytic and central differences."""

    def __init__(self, tolerance: float):
        self.tolerance = tolerance
        self.errors: dict[str, float] = {}

    def record(self, name: str, err: float) -> None:
        self.errors[name] = err

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            flag = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{flag:4s} {name:40s} max_rel_err={err:.3e}")
        return out


def grad_check(fn: Callable[[], Node], params: dict, step: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of fn() against central finite differences.

    `params` maps names to leaf Nodes that fn reads.  The relative error per
    element is |analytic - central| / max(1, |central|); the report keeps the
    max per tensor.  Raises GradCheckError if the loss goes non-finite at a
    perturbed point.
    """
    if step <= 0 or tolerance <= 0:
        raise ValueError("step and tolerance must be positive")
    for p in params.values():
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = {name: grad(p).copy() for name, p in params.items()}

    report = GradCheckReport(tolerance)
    for name, p in params.items():
        flat = p.value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().value)
            flat[i] = orig - step
            down = float(fn().value)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(
                    f"non-finite loss while perturbing {name}[{i}]")
            central = (up - down) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
        report.record(name, worst)
    return report
