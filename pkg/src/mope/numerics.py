"""Float64 tensors with a small reverse-mode autodiff engine.

Every op takes and returns :class:`Node` objects wrapping numpy arrays of rank
at most 3 (batch x seq x dim). Gradients flow only through nodes created with
``requires_grad=True`` (parameters) or derived from them; everything else is
evaluated eagerly without recording a graph.

Checked mode rejects NaN/Inf values and rank > 3 arrays at construction. It is
on unless the ``MOPE_CHECKED`` environment variable is ``0``.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterator, Sequence

import numpy as np

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
MAX_RANK = 3

_checked = os.environ.get("MOPE_CHECKED", "1") != "0"


class NumericsError(ValueError):
    """Shape mismatch, non-finite value, or contract violation."""


def is_checked() -> bool:
    return _checked


def set_checked(flag: bool) -> None:
    global _checked
    _checked = bool(flag)


@contextlib.contextmanager
def checked(flag: bool = True) -> Iterator[None]:
    prev = _checked
    set_checked(flag)
    try:
        yield
    finally:
        set_checked(prev)


def as_array(data) -> np.ndarray:
    """Coerce to a contiguous float64 array, validating in checked mode."""
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if _checked:
        if arr.ndim > MAX_RANK:
            raise NumericsError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        if not np.isfinite(arr).all():
            raise NumericsError("non-finite value in tensor")
    return arr


class Node:
    """A value in the computation graph.

    ``parents`` holds ``(node, rule)`` pairs where ``rule`` maps the upstream
    gradient to this parent's gradient contribution.
    """

    __slots__ = ("value", "_grad", "parents", "op", "requires_grad")

    def __init__(self, value, parents=(), op: str = "leaf", requires_grad: bool = False):
        self.value = as_array(value)
        self._grad: np.ndarray | None = None
        self.parents: tuple[tuple[Node, Callable[[np.ndarray], np.ndarray]], ...] = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    # operator sugar, used sparingly in the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(node: Node):
    raise NumericsError(f"expected a scalar, got shape {node.shape}")


def param(data) -> Node:
    return Node(data, requires_grad=True)


def const(data) -> Node:
    return data if isinstance(data, Node) else Node(data)


def _make(value: np.ndarray, op: str, parents) -> Node:
    live = tuple((p, rule) for p, rule in parents if p.requires_grad)
    if not live:
        return Node(value, op=op)
    return Node(value, live, op=op, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Node:
    a, b = const(a), const(b)
    return _make(
        a.value + b.value,
        "add",
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    return _make(
        a.value - b.value,
        "sub",
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))],
    )


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    return _make(
        a.value * b.value,
        "mul",
        [
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ],
    )


def scale(a, c: float) -> Node:
    a = const(a)
    return _make(a.value * c, "scale", [(a, lambda g: g * c)])


def exp(a) -> Node:
    a = const(a)
    out = np.exp(a.value)
    return _make(out, "exp", [(a, lambda g: g * out)])


def log(a) -> Node:
    a = const(a)
    return _make(np.log(a.value), "log", [(a, lambda g: g / a.value)])


def square(a) -> Node:
    a = const(a)
    return _make(a.value * a.value, "square", [(a, lambda g: 2.0 * g * a.value)])


def gelu(x) -> Node:
    """Tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = const(x)
    v = x.value
    inner = _SQRT_2_OVER_PI * (v + GELU_COEF * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def rule(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * v * v)
        return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)

    return _make(out, "gelu", [(x, rule)])


# -- reductions and shape ops ------------------------------------------------


def sum_all(a) -> Node:
    a = const(a)
    return _make(np.array(a.value.sum()), "sum", [(a, lambda g: np.broadcast_to(g, a.shape).copy())])


def mean_all(a) -> Node:
    a = const(a)
    n = a.value.size
    return _make(
        np.array(a.value.sum() / n), "mean", [(a, lambda g: np.full(a.shape, float(g) / n))]
    )


def mean_axis(a, axis: int) -> Node:
    a = const(a)
    n = a.shape[axis]
    out = a.value.mean(axis=axis)
    return _make(
        out,
        "mean_axis",
        [(a, lambda g: np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy())],
    )


def transpose(a) -> Node:
    """Swap the last two axes."""
    a = const(a)
    return _make(np.swapaxes(a.value, -1, -2), "transpose", [(a, lambda g: np.swapaxes(g, -1, -2))])


def take_cols(a, start: int, stop: int) -> Node:
    """Slice ``a[..., start:stop]``."""
    a = const(a)

    def rule(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return full

    return _make(a.value[..., start:stop], "take_cols", [(a, rule)])


def take_rows(a, start: int, stop: int) -> Node:
    """Slice ``a[start:stop]`` along the first axis of a matrix."""
    a = const(a)

    def rule(g):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return full

    return _make(a.value[start:stop], "take_rows", [(a, rule)])


def gather(table, ids: np.ndarray) -> Node:
    """Embedding lookup: rows of a 2-d ``table`` indexed by integer ``ids``."""
    table = const(table)
    ids = np.asarray(ids)

    def rule(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return full

    return _make(table.value[ids], "gather", [(table, rule)])


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Node:
    """Matrix product over the last two axes, batched over a leading axis."""
    a, b = const(a), const(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.value, b.value)

    def rule_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)

    def rule_b(g):
        if b.value.ndim == 2 and a.value.ndim == 3:
            k, n = b.shape
            return a.value.reshape(-1, k).T @ g.reshape(-1, n)
        return _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)

    return _make(out, "matmul", [(a, rule_a), (b, rule_b)])


# -- normalisation and softmax ------------------------------------------------


def softmax_rows(x) -> Node:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = const(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return p * (g - (g * p).sum(axis=-1, keepdims=True))

    return _make(p, "softmax", [(x, rule)])


def log_softmax_rows(x) -> Node:
    x = const(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def rule(g):
        return g - p * g.sum(axis=-1, keepdims=True)

    return _make(out, "log_softmax", [(x, rule)])


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Node:
    if eps <= 0:
        raise NumericsError("layer_norm eps must be positive")
    x, gamma, beta = const(x), const(gamma), const(beta)
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.value + beta.value
    d = v.shape[-1]

    def rule_x(g):
        gx = g * gamma.value
        return inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    return _make(
        out,
        "layer_norm",
        [
            (x, rule_x),
            (gamma, lambda g: (g * xhat).reshape(-1, d).sum(axis=0)),
            (beta, lambda g: g.reshape(-1, d).sum(axis=0)),
        ],
    )


def l2_normalize_rows(x, eps: float = 1e-12) -> Node:
    x = const(x)
    norm = np.sqrt((x.value * x.value).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.value / norm

    def rule(g):
        return (g - y * (g * y).sum(axis=-1, keepdims=True)) / norm

    return _make(y, "l2_normalize", [(x, rule)])


def mse(a, b) -> Node:
    """Mean squared error averaged over every element."""
    return mean_all(square(sub(a, b)))


# -- backward and gradient checking -------------------------------------------


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d loss / d value into ``.grad`` of every reachable node."""
    if loss.value.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node._grad = g if node._grad is None else node._grad + g
            continue
        node._grad = g
        for parent, rule in node.parents:
            contrib = rule(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib


def grad_check(
    f: Callable[..., Node],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` receives one node per array in ``params`` and returns a scalar node.
    With ``max_entries`` set, a seeded random subset of coordinates is probed
    per parameter array.
    """
    if not 0 < eps <= 1e-2:
        raise NumericsError("eps must lie in (0, 1e-2]")
    arrays = [np.array(p, dtype=np.float64) for p in params]
    leaves = [param(a) for a in arrays]
    backward(f(*leaves))
    analytic = [leaf.grad.copy() for leaf in leaves]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            up = f(*[const(a) for a in arrays]).item()
            flat[j] = orig - eps
            down = f(*[const(a) for a in arrays]).item()
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[i].reshape(-1)[j]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
