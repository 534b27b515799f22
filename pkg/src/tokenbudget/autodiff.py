"""Dense-tensor arithmetic with reverse-mode differentiation.

A Tensor wraps a read-only numpy array plus an optional gradient tape:
each operation records its parents and a closure that routes the output
gradient back to them.  ``backward()`` walks the graph in reverse
topological order, visiting every node exactly once.

The op surface is deliberately small (no general broadcasting beyond
row-vector bias addition) so every gradient rule stays auditable; every
backward here is checked against central finite differences in the test
suite.  Gradient checks require float64; float32 data is accepted for
inference paths.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError

Array = np.ndarray


class Tensor:
    """Immutable dense array with an optional place on a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], None] | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float64, copy=False)
        if arr.base is not None or any(p.data is arr for p in _parents):
            arr = arr.copy()
        arr.setflags(write=False)
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut loose from the tape."""
        return Tensor(self.data)

    def backward(self, grad: Array | None = None) -> None:
        """Accumulate gradients of this tensor into every ancestor.

        Clears stale gradients on the subgraph first, so each call
        reports gradients of exactly this tensor.
        """
        if grad is None:
            if self.size != 1:
                raise DimensionError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g: Array) -> None:
        if not self.requires_grad:
            return
        self.grad = g.copy() if self.grad is None else self.grad + g

    # Minimal operator sugar; the full op set lives at module level.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def toposort(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the graph rooted at ``root``.

    Iterative DFS; each node appears exactly once, which is what makes
    backward's single-visit contract hold.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _require_2d(name: str, t: Tensor) -> None:
    if t.ndim != 2:
        raise DimensionError(f"{name} expects a 2-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g: Array) -> None:
        a._accumulate(g)
        b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-vector bias addition, the only broadcast this library allows."""
    _require_2d("add_bias", x)
    if bias.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise DimensionError(f"add_bias: bias shape {bias.shape} does not match columns of {x.shape}")

    def backward(g: Array) -> None:
        x._accumulate(g)
        bias._accumulate(g.sum(axis=0))

    return _result(x.data + bias.data, (x, bias), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")

    def backward(g: Array) -> None:
        a._accumulate(g)
        b._accumulate(-g)

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g: Array) -> None:
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g: Array) -> None:
        a._accumulate(g * s)

    return _result(a.data * s, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """GELU in its tanh form (the GPT-2 variant)."""
    c = np.sqrt(2.0 / np.pi)
    x = a.data
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g: Array) -> None:
        d_inner = c * (1.0 + 3 * 0.044715 * x**2)
        grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
        a._accumulate(g * grad)

    return _result(out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g: Array) -> None:
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)

    def backward(g: Array) -> None:
        a._accumulate(g.T)

    return _result(a.data.T, (a,), backward)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    for p in parts:
        _require_2d("concat_rows", p)
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def backward(g: Array) -> None:
        for p, chunk in zip(parts, np.split(g, splits, axis=0)):
            p._accumulate(chunk)

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    for p in parts:
        _require_2d("concat_cols", p)
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def backward(g: Array) -> None:
        for p, chunk in zip(parts, np.split(g, splits, axis=1)):
            p._accumulate(chunk)

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_rows", a)

    def backward(g: Array) -> None:
        full = np.zeros(a.shape, dtype=g.dtype)
        full[start:stop] = g
        a._accumulate(full)

    return _result(a.data[start:stop], (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_cols", a)

    def backward(g: Array) -> None:
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, start:stop] = g
        a._accumulate(full)

    return _result(a.data[:, start:stop], (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        a._accumulate(np.full(a.shape, float(g), dtype=a.dtype))

    return _result(np.asarray(a.data.sum()), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def backward(g: Array) -> None:
        a._accumulate(np.full(a.shape, float(g) / n, dtype=a.dtype))

    return _result(np.asarray(a.data.mean()), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")

    def backward(g: Array) -> None:
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# softmax family and normalization


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; stable for any finite input."""
    _require_2d("softmax_rows", x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g: Array) -> None:
        dot = (g * y).sum(axis=1, keepdims=True)
        x._accumulate(y * (g - dot))

    return _result(y, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    _require_2d("log_softmax_rows", x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - logz
    soft = np.exp(out)

    def backward(g: Array) -> None:
        x._accumulate(g - soft * g.sum(axis=1, keepdims=True))

    return _result(out, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by an affine map."""
    _require_2d("layernorm", x)
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layernorm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g: Array) -> None:
        dxhat = g * gain.data
        dvar = (dxhat * centered * -0.5 * inv**3).sum(axis=1, keepdims=True)
        dmu = (-dxhat * inv).sum(axis=1, keepdims=True) + dvar * (-2.0 * centered).mean(
            axis=1, keepdims=True
        )
        x._accumulate(dxhat * inv + dvar * 2.0 * centered / d + dmu / d)
        gain._accumulate((g * xhat).sum(axis=0))
        bias._accumulate(g.sum(axis=0))

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# similarity


def cosine_matrix_data(a: Array, b: Array, eps: float = 1e-8) -> Array:
    """Pairwise cosine similarity on raw arrays, norms floored at eps.

    Zero vectors come out with similarity 0 instead of NaN, so degenerate
    merged tokens cannot poison downstream thresholding.
    """
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    fa = np.maximum(na, eps)
    fb = np.maximum(nb, eps)
    return (a @ b.T) / (fa[:, None] * fb[None, :])


def cosine_matrix(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    _require_2d("cosine_matrix", a)
    _require_2d("cosine_matrix", b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_matrix: feature dims differ, {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    fa = np.maximum(na, eps)
    fb = np.maximum(nb, eps)
    denom = fa[:, None] * fb[None, :]
    c = (a.data @ b.data.T) / denom

    def backward(g: Array) -> None:
        w = g / denom
        # The norm factor only varies where the true norm clears the eps floor.
        live_a = (na > eps).astype(a.dtype)
        live_b = (nb > eps).astype(b.dtype)
        a._accumulate(w @ b.data - live_a[:, None] * a.data * ((g * c).sum(axis=1) / fa**2)[:, None])
        b._accumulate(w.T @ a.data - live_b[:, None] * b.data * ((g * c).sum(axis=0) / fb**2)[:, None])

    return _result(c, (a, b), backward)


# ---------------------------------------------------------------------------
# discrete-decision plumbing


def straight_through(soft: Tensor, hard: Array) -> Tensor:
    """Forward the hard values; route gradients to the soft relaxation unchanged."""
    if soft.shape != hard.shape:
        raise DimensionError(f"straight_through: shapes {soft.shape} and {hard.shape} differ")

    def backward(g: Array) -> None:
        soft._accumulate(g)

    return _result(np.asarray(hard, dtype=soft.dtype), (soft,), backward)


def group_mean_rows(x: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """One output row per group: the arithmetic mean of the member rows.

    Evaluated in anchored form (first member plus mean of differences) so a
    group of bit-identical rows reproduces that row exactly.  Group
    membership is data, not part of the gradient path; gradients flow only
    through the averaging arithmetic (1/m to every member).
    """
    _require_2d("group_mean_rows", x)
    out = np.empty((len(groups), x.shape[1]), dtype=x.dtype)
    for i, members in enumerate(groups):
        base = x.data[members[0]]
        if len(members) == 1:
            out[i] = base
        else:
            diff = x.data[list(members[1:])] - base
            out[i] = base + diff.sum(axis=0) / len(members)

    def backward(g: Array) -> None:
        full = np.zeros(x.shape, dtype=g.dtype)
        for i, members in enumerate(groups):
            contrib = g[i] / len(members)
            for m in members:
                full[m] += contrib
        x._accumulate(full)

    return _result(out, (x,), backward)
