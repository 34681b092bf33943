"""Reverse-mode differentiation over numpy arrays.

A small tape: every operation returns a :class:`Tensor` node wrapping an
ndarray plus a backward closure. Graphs are built per training step and
freed once the step's backward pass has run. Everything is float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """A value that must be finite (input, gradient, loss) is not."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """One node of the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_param")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._backward: Callable[[], None] | None = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._param: Parameter | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def backward(self) -> None:
        """Propagate gradients from this (scalar) node to every leaf."""
        if self.value.size != 1:
            raise ValueError("backward() starts from a scalar loss node")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.grad is None:
                continue
            if node._backward is not None:
                node._backward()
            if node._param is not None:
                node._param.grad += node.grad

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return NotImplemented

    __rmul__ = __mul__


def constant(value) -> Tensor:
    """Wrap an array as a non-differentiable graph input."""
    t = Tensor(value)
    if not np.all(np.isfinite(t.value)):
        raise NonFiniteError("graph input contains non-finite values")
    return t


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _accum(node: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add g to the node's gradient. ``own=True`` promises g is a fresh
    array no one else holds, so it can be adopted without copying."""
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g if own else g.copy()
    else:
        node.grad += g


class Parameter:
    """A trainable array: value, gradient and Adam moment buffers (one shape)."""

    __slots__ = ("name", "value", "grad", "m", "v", "steps")

    def __init__(self, value, name: str = ""):
        self.name = name
        self.value = _as_array(value).copy()
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"parameter {name or '<unnamed>'} is non-finite")
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.steps = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def tensor(self) -> Tensor:
        """Graph leaf for the current value; backward accumulates into .grad."""
        t = Tensor(self.value, requires_grad=True)
        t._param = self
        return t

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


# ---------------------------------------------------------------------------
# primitive operations


def add(x, y) -> Tensor:
    x, y = _wrap(x), _wrap(y)
    if x.shape != y.shape:
        raise ValueError(f"add: shape mismatch {x.shape} vs {y.shape}")
    out = Tensor(x.value + y.value, (x, y))

    def back():
        _accum(x, out.grad)
        _accum(y, out.grad)

    out._backward = back
    return out


def add_bias(x, b) -> Tensor:
    """(N, D) + (D,) row-broadcast add."""
    x, b = _wrap(x), _wrap(b)
    if x.value.ndim != 2 or b.value.shape != (x.shape[1],):
        raise ValueError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")
    out = Tensor(x.value + b.value, (x, b))

    def back():
        _accum(x, out.grad)
        _accum(b, out.grad.sum(axis=0), own=True)

    out._backward = back
    return out


def scale(x, s: float) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.value * s, (x,))
    out._backward = lambda: _accum(x, out.grad * s, own=True)
    return out


def mul_const(x, c) -> Tensor:
    """Elementwise multiply by a fixed array (broadcast against x)."""
    x = _wrap(x)
    c = _as_array(c)
    val = x.value * c
    if val.shape != x.shape:
        raise ValueError("mul_const: constant must broadcast to x without growing it")
    out = Tensor(val, (x,))
    out._backward = lambda: _accum(x, out.grad * c, own=True)
    return out


def sub_const(x, c) -> Tensor:
    x = _wrap(x)
    c = _as_array(c)
    if c.shape != x.shape:
        raise ValueError(f"sub_const: shape mismatch {x.shape} vs {c.shape}")
    out = Tensor(x.value - c, (x,))
    out._backward = lambda: _accum(x, out.grad)
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value, (a, b))

    def back():
        _accum(a, out.grad @ b.value.T, own=True)
        _accum(b, a.value.T @ out.grad, own=True)

    out._backward = back
    return out


def transpose(x) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.value.T, (x,))
    out._backward = lambda: _accum(x, out.grad.T)
    return out


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.value.reshape(shape), (x,))
    out._backward = lambda: _accum(x, out.grad.reshape(x.shape))
    return out


def relu(x) -> Tensor:
    x = _wrap(x)
    out = Tensor(np.maximum(x.value, 0.0), (x,))
    out._backward = lambda: _accum(x, out.grad * (x.value > 0.0), own=True)
    return out


def concat_rows(parts: Sequence) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=0), tuple(parts))
    sizes = [p.shape[0] for p in parts]

    def back():
        off = 0
        for p, n in zip(parts, sizes):
            _accum(p, out.grad[off : off + n])
            off += n

    out._backward = back
    return out


def take_rows(x, indices) -> Tensor:
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(x.value[idx], (x,))

    def back():
        g = np.zeros_like(x.value)
        np.add.at(g, idx, out.grad)
        _accum(x, g, own=True)

    out._backward = back
    return out


def log_clamped(x, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is zero on the clamped set."""
    x = _wrap(x)
    clipped = np.maximum(x.value, floor)
    out = Tensor(np.log(clipped), (x,))
    out._backward = lambda: _accum(x, out.grad * (x.value > floor) / clipped, own=True)
    return out


def square(x) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.value * x.value, (x,))
    out._backward = lambda: _accum(x, out.grad * 2.0 * x.value, own=True)
    return out


def sum_all(x) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.value.sum(), (x,))
    out._backward = lambda: _accum(x, np.broadcast_to(out.grad, x.shape).copy(), own=True)
    return out


def linear(x, weight, bias=None) -> Tensor:
    """y = x @ W (+ b). ``weight``/``bias`` may be Parameters or Tensors."""
    w = weight.tensor() if isinstance(weight, Parameter) else _wrap(weight)
    y = matmul(x, w)
    if bias is not None:
        b = bias.tensor() if isinstance(bias, Parameter) else _wrap(bias)
        y = add_bias(y, b)
    return y


# ---------------------------------------------------------------------------
# grouped softmax


def _group_columns(groups) -> list[np.ndarray]:
    labels = list(groups)
    order: list = []
    for g in labels:
        if g not in order:
            order.append(g)
    return [np.array([j for j, g in enumerate(labels) if g == grp]) for grp in order]


def grouped_softmax(logits, groups, valid=None) -> Tensor:
    """Softmax normalized independently inside each column group of each row.

    ``groups`` assigns one label per column. ``valid`` (optional bool array,
    same shape) marks entries that take part; excluded entries come out 0.
    A (row, group) whose entries are all excluded stays entirely 0.
    """
    x = _wrap(logits)
    z = x.value
    if z.ndim != 2 or len(list(groups)) != z.shape[1]:
        raise ValueError("grouped_softmax: need N×M logits and one label per column")
    if valid is None:
        valid = np.ones(z.shape, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != z.shape:
            raise ValueError("grouped_softmax: valid mask shape mismatch")

    cols = _group_columns(groups)
    probs = np.zeros_like(z)
    for idx in cols:
        sub = np.where(valid[:, idx], z[:, idx], -np.inf)
        mx = np.max(sub, axis=1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.exp(sub - mx)
        e[~valid[:, idx]] = 0.0
        s = e.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            p = np.where(s > 0.0, e / np.where(s > 0.0, s, 1.0), 0.0)
        probs[:, idx] = p

    out = Tensor(probs, (x,))

    def back():
        g = out.grad
        dz = np.zeros_like(z)
        for idx in cols:
            p = probs[:, idx]
            gp = g[:, idx]
            dot = (gp * p).sum(axis=1, keepdims=True)
            dz[:, idx] = p * (gp - dot)
        _accum(x, dz, own=True)

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_gradient(f, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _as_array(x)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
