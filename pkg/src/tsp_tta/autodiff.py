"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Provides exactly the primitives the tour policy needs: matrix products, masked
softmax, layer normalization, and a handful of elementwise and shape ops.
Graphs are built per forward pass and discarded after ``backward``; there is
no tape reuse. Values are float64 throughout.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "ShapeError",
    "MaskError",
    "no_grad",
    "grad_enabled",
    "as_node",
    "matmul",
    "matmul_batch",
    "add",
    "add_const",
    "add_bias",
    "mul_scalar",
    "relu",
    "log",
    "gather_rows",
    "gather_rows_batch",
    "pick_batch",
    "concat",
    "transpose",
    "reshape",
    "sum_all",
    "mean_all",
    "weighted_sum",
    "softmax",
    "softmax_batch",
    "multi_head_attention",
    "layer_norm",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class MaskError(ValueError):
    """Softmax mask leaves no selectable position."""


class _GradFlag(threading.local):
    # Per-thread so parallel inference workers can disable recording
    # independently of a training thread.
    enabled = True


_flag = _GradFlag()


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _flag.enabled
        _flag.enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _flag.enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _flag.enabled


class Node:
    """A value in the computation graph.

    ``value`` is a float64 ndarray. ``grad`` is allocated lazily during
    ``backward``. Leaf nodes have no parents; interior nodes carry a closure
    that routes the incoming output gradient to their parents.
    """

    __slots__ = ("value", "grad", "parents", "op", "_push")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple = (),
        op: str = "leaf",
        push: Callable[[np.ndarray], None] | None = None,
    ):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.op = op
        self._push = push

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def as_node(x) -> Node:
    """Wrap an array (or Node) as a leaf Node with float64 storage."""
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=np.float64))


def _accumulate(node: Node, g: np.ndarray, own: bool = False) -> None:
    # own=True promises g is freshly allocated and safe to adopt in place.
    if node.grad is None:
        node.grad = g if own else np.array(g, dtype=np.float64)
    else:
        node.grad += g


def _make(value: np.ndarray, parents: tuple, op: str, push: Callable) -> Node:
    if not _flag.enabled:
        return Node(value)
    return Node(value, parents, op, push)


def matmul(a: Node, b: Node) -> Node:
    """Matrix product of two 2-D nodes."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    out = av @ bv

    def push(g):
        _accumulate(a, g @ bv.T, own=True)
        _accumulate(b, av.T @ g, own=True)

    return _make(out, (a, b), "matmul", push)


def matmul_batch(a: Node, w: Node) -> Node:
    """Right-multiply a batched (B, m, k) node by a shared (k, n) matrix."""
    av, wv = a.value, w.value
    if av.ndim != 3 or wv.ndim != 2 or av.shape[2] != wv.shape[0]:
        raise ShapeError(f"matmul_batch: incompatible shapes {av.shape} @ {wv.shape}")
    out = av @ wv

    def push(g):
        _accumulate(a, g @ wv.T, own=True)
        _accumulate(w, np.einsum("bmk,bmn->kn", av, g), own=True)

    return _make(out, (a, w), "matmul_batch", push)


def add_const(x: Node, c: np.ndarray) -> Node:
    """Add a fixed (non-learnable) array, broadcast against x."""
    out = x.value + c
    if out.shape != x.value.shape:
        raise ShapeError(f"add_const: broadcast changes shape {x.value.shape}")

    def push(g):
        _accumulate(x, g)

    return _make(out, (x,), "add_const", push)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum of two same-shape nodes."""
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shape mismatch {a.value.shape} vs {b.value.shape}")
    out = a.value + b.value

    def push(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(out, (a, b), "add", push)


def add_bias(x: Node, b: Node) -> Node:
    """Add a length-d bias vector to every row of an (..., d) node."""
    if x.value.ndim < 2 or b.value.shape != (x.value.shape[-1],):
        raise ShapeError(f"add_bias: {x.value.shape} + {b.value.shape}")
    out = x.value + b.value
    lead = tuple(range(x.value.ndim - 1))

    def push(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=lead), own=True)

    return _make(out, (x, b), "add_bias", push)


def mul_scalar(x: Node, c: float) -> Node:
    """Multiply a node by a python float constant."""
    c = float(c)
    out = x.value * c

    def push(g):
        _accumulate(x, g * c, own=True)

    return _make(out, (x,), "mul_scalar", push)


def relu(x: Node) -> Node:
    out = np.maximum(x.value, 0.0)
    mask = x.value > 0.0

    def push(g):
        _accumulate(x, g * mask, own=True)

    return _make(out, (x,), "relu", push)


def log(x: Node) -> Node:
    """Natural log; domain is strictly positive values."""
    out = np.log(x.value)
    xv = x.value

    def push(g):
        _accumulate(x, g / xv, own=True)

    return _make(out, (x,), "log", push)


def gather_rows(x: Node, indices) -> Node:
    """Select rows (leading-axis entries) by index; duplicates allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    out = x.value[idx]
    shape = x.value.shape

    def push(g):
        buf = np.zeros(shape, dtype=np.float64)
        np.add.at(buf, idx, g)
        _accumulate(x, buf, own=True)

    return _make(out, (x,), "gather_rows", push)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    """Concatenate nodes along an axis."""
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat: empty input")
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def push(g):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(n, g[tuple(sl)])

    return _make(out, tuple(nodes), "concat", push)


def transpose(x: Node) -> Node:
    if x.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {x.value.shape}")
    out = x.value.T

    def push(g):
        _accumulate(x, g.T)

    return _make(out, (x,), "transpose", push)


def reshape(x: Node, shape) -> Node:
    out = x.value.reshape(shape)
    orig = x.value.shape

    def push(g):
        _accumulate(x, g.reshape(orig))

    return _make(out, (x,), "reshape", push)


def sum_all(x: Node) -> Node:
    out = np.asarray(x.value.sum())
    shape = x.value.shape

    def push(g):
        _accumulate(x, np.full(shape, float(g)), own=True)

    return _make(out, (x,), "sum", push)


def mean_all(x: Node) -> Node:
    size = x.value.size
    out = np.asarray(x.value.sum() / size)
    shape = x.value.shape

    def push(g):
        _accumulate(x, np.full(shape, float(g) / size), own=True)

    return _make(out, (x,), "mean", push)


def softmax(x: Node, mask: np.ndarray) -> Node:
    """Masked softmax over a 1-D node. ``mask`` marks excluded positions.

    Masked positions receive exactly zero probability; the rest are
    exp(x_j - max) normalized over the surviving entries.
    """
    xv = x.value
    mask = np.asarray(mask, dtype=bool)
    if xv.ndim != 1 or mask.shape != xv.shape:
        raise ShapeError(f"softmax: x {xv.shape} mask {mask.shape}")
    if mask.all():
        raise MaskError("softmax: all positions masked")
    keep = ~mask
    shifted = xv - xv[keep].max()
    e = np.exp(shifted)
    e[mask] = 0.0
    y = e / e.sum()

    def push(g):
        _accumulate(x, y * (g - float(g @ y)), own=True)

    return _make(y, (x,), "softmax", push)


def multi_head_attention(
    q: Node, k: Node, v: Node, n_heads: int, mask: np.ndarray | None = None
) -> Node:
    """Scaled dot-product attention over head-split projections.

    q is (Lq, d) or batched (B, Lq, d); k and v are (Lk, d) or (B, Lk, d);
    d must divide evenly into n_heads. Per head:
    softmax(q_h k_hT / sqrt(d/h) + mask) v_h, heads re-concatenated along the
    last axis. ``mask`` is an additive constant (Lq, Lk) array (not
    differentiated), used for causal masking.
    """
    qv, kv, vv = q.value, k.value, v.value
    if qv.ndim not in (2, 3) or kv.ndim != qv.ndim or kv.shape != vv.shape:
        raise ShapeError(
            f"attention: q {qv.shape}, k {kv.shape}, v {vv.shape} incompatible"
        )
    d = qv.shape[-1]
    if kv.shape[-1] != d or (qv.ndim == 3 and qv.shape[0] != kv.shape[0]):
        raise ShapeError(
            f"attention: q {qv.shape}, k {kv.shape}, v {vv.shape} incompatible"
        )
    if d % n_heads != 0:
        raise ShapeError(f"attention: width {d} not divisible by {n_heads} heads")
    lq, lk = qv.shape[-2], kv.shape[-2]
    if mask is not None and mask.shape != (lq, lk):
        raise ShapeError(f"attention: mask {mask.shape} != ({lq}, {lk})")
    dk = d // n_heads
    inv = 1.0 / np.sqrt(dk)
    batched = qv.ndim == 3
    out_shape = qv.shape

    def split(m, rows):
        # (..., rows, d) -> (..., heads, rows, dk) with heads before rows
        return m.reshape(m.shape[:-2] + (rows, n_heads, dk)).swapaxes(-3, -2)

    def merge(m, rows):
        return m.swapaxes(-3, -2).reshape(m.shape[:-3] + (rows, d))

    qh, kh, vh = split(qv, lq), split(kv, lk), split(vv, lk)
    scores = qh @ kh.swapaxes(-2, -1) * inv
    if mask is not None:
        scores = scores + mask
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    a = e / e.sum(axis=-1, keepdims=True)
    out = merge(a @ vh, lq)
    assert out.shape == out_shape

    def push(g):
        gh = split(g, lq)
        _accumulate(v, merge(a.swapaxes(-2, -1) @ gh, lk), own=True)
        da = gh @ vh.swapaxes(-2, -1)
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        ds *= inv
        _accumulate(q, merge(ds @ kh, lq), own=True)
        _accumulate(k, merge(ds.swapaxes(-2, -1) @ qh, lk), own=True)

    return _make(out, (q, k, v), "multi_head_attention", push)


def softmax_batch(x: Node, mask: np.ndarray) -> Node:
    """Row-wise masked softmax over a (B, n) node; same contract per row as
    ``softmax`` (masked entries exactly zero, each row sums to one)."""
    xv = x.value
    mask = np.asarray(mask, dtype=bool)
    if xv.ndim != 2 or mask.shape != xv.shape:
        raise ShapeError(f"softmax_batch: x {xv.shape} mask {mask.shape}")
    if mask.all(axis=1).any():
        raise MaskError("softmax_batch: some row has all positions masked")
    shifted = xv - np.where(mask, -np.inf, xv).max(axis=1, keepdims=True)
    e = np.exp(shifted)
    e[mask] = 0.0
    y = e / e.sum(axis=1, keepdims=True)

    def push(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accumulate(x, y * (g - dot), own=True)

    return _make(y, (x,), "softmax_batch", push)


def gather_rows_batch(x: Node, indices) -> Node:
    """Per-batch row selection: x is (B, R, d), indices (B,) -> (B, 1, d)."""
    idx = np.asarray(indices, dtype=np.intp)
    xv = x.value
    if xv.ndim != 3 or idx.shape != (xv.shape[0],):
        raise ShapeError(f"gather_rows_batch: x {xv.shape} idx {idx.shape}")
    batch = np.arange(xv.shape[0])
    out = xv[batch, idx][:, None, :]
    shape = xv.shape

    def push(g):
        buf = np.zeros(shape, dtype=np.float64)
        buf[batch, idx] = g[:, 0, :]
        _accumulate(x, buf, own=True)

    return _make(out, (x,), "gather_rows_batch", push)


def pick_batch(x: Node, indices) -> Node:
    """Per-batch entry selection: x is (B, n), indices (B,) -> (B,)."""
    idx = np.asarray(indices, dtype=np.intp)
    xv = x.value
    if xv.ndim != 2 or idx.shape != (xv.shape[0],):
        raise ShapeError(f"pick_batch: x {xv.shape} idx {idx.shape}")
    batch = np.arange(xv.shape[0])
    out = xv[batch, idx]
    shape = xv.shape

    def push(g):
        buf = np.zeros(shape, dtype=np.float64)
        buf[batch, idx] = g
        _accumulate(x, buf, own=True)

    return _make(out, (x,), "pick_batch", push)


def weighted_sum(x: Node, weights: np.ndarray) -> Node:
    """Scalar dot product with a fixed weight vector (weights not differentiated)."""
    w = np.asarray(weights, dtype=np.float64)
    if x.value.shape != w.shape or x.value.ndim != 1:
        raise ShapeError(f"weighted_sum: x {x.value.shape} weights {w.shape}")
    out = np.asarray(float(x.value @ w))

    def push(g):
        _accumulate(x, float(g) * w, own=True)

    return _make(out, (x,), "weighted_sum", push)


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Normalize the last axis to mean 0 / variance 1, then apply the affine map."""
    xv = x.value
    d = xv.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm: last-axis size must be >= 2")
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = xv.mean(axis=-1, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gain.value + bias.value

    def push(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead), own=True)
        _accumulate(bias, g.sum(axis=lead), own=True)
        dxh = g * gain.value
        a = dxh.mean(axis=-1, keepdims=True)
        b = (dxh * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (dxh - a - xhat * b), own=True)

    return _make(out, (x, gain, bias), "layer_norm", push)


def backward(loss: Node) -> None:
    """Reverse sweep from a scalar loss; gradients accumulate additively.

    After the call every node reachable from ``loss`` that influenced it has
    a ``grad`` of the same shape as its value.
    """
    if loss.value.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node._push is not None and node.grad is not None:
            node._push(node.grad)
