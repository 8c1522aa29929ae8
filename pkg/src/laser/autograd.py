"""Dense float64 tensors with taped reverse-mode differentiation.

The op set is exactly what the model and losses need: elementwise
arithmetic, matmul, row/column splicing, numerically stable softmax
variants, and cross-entropy against soft targets. Stop-gradient is a
graph-construction fact rather than a runtime flag: a detached tensor
records no parents, so anything computed from it stays off the tape.

All data is float64 and row-major. Tensors are immutable by convention
after construction; only ``grad`` is written, by :func:`backward` or an
explicit reset (``grad_check`` perturbs ``data`` in place and restores
it, the one sanctioned exception).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus the tape metadata needed for backward.

    ``op`` names the producing operation ("leaf" for inputs), ``_parents``
    holds the gradient-requiring inputs, and ``_bwd`` maps an upstream
    gradient to (parent, contribution) pairs. A tensor whose inputs all
    have ``requires_grad=False`` records no parents, keeping constant
    subgraphs off the tape entirely.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), bwd: Callable | None = None):
        self.data = _as_f64(data)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.op = op
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return (f"Tensor(op={self.op!r}, shape={self.data.shape}, "
                f"requires_grad={self.requires_grad})")


def _make(data: Array, op: str, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    live = tuple(t for t in inputs if t.requires_grad)
    if not live:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=live, bwd=bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """Detach: value-identical tensor with no parents and no gradient."""
    return Tensor(x.data, requires_grad=False, op="stop_gradient")


def backward(root: Tensor) -> None:
    """Reverse-mode accumulation from a scalar root.

    Each call is a standalone pass over the graph below ``root`` in
    reverse topological order, visiting every node once. Leaf gradients
    add into ``.grad``, so separate passes over graphs sharing leaves
    accumulate; resets are explicit via ``zero_grad``.
    """
    if root.data.size != 1:
        raise ValueError("backward root must be scalar")
    if not root.requires_grad:
        return
    # postorder over the DAG; a node is marked visited when expanded, not
    # when first pushed, so shared nodes sort after every consumer
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    flowing: dict[int, Array] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in node._bwd(g):
            pid = id(parent)
            if pid in flowing:
                flowing[pid] = flowing[pid] + pg
            else:
                flowing[pid] = pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# --------------------------------------------------------------------------
# shared forward kernels (also used by the tape-free inference path)

def softmax_array(z: Array, axis: int = -1) -> Array:
    """Stable softmax of a plain array; large gaps underflow to 0, never NaN."""
    z = _as_f64(z)
    if z.shape[axis] == 0:
        raise ValueError("empty distribution")
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_sum_exp(z: Array, axis: int = -1) -> Array:
    z = _as_f64(z)
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def rmsnorm_array(x: Array, scale: Array, eps: float = 1e-6) -> tuple[Array, Array]:
    ms = (x * x).mean(axis=-1, keepdims=True) + eps
    inv = 1.0 / np.sqrt(ms)
    return x * inv * scale, inv


def causal_softmax_array(scores: Array) -> Array:
    n = scores.shape[0]
    masked = np.where(np.triu(np.ones((n, n), dtype=bool), k=1), -np.inf, scores)
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# elementwise and reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, g))
        if b.requires_grad:
            out.append((b, g))
        return out
    return _make(a.data + b.data, "add", (a, b), bwd)


def add_n(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        raise ValueError("add_n needs at least one term")
    data = terms[0].data.copy()
    for t in terms[1:]:
        data = data + t.data
    def bwd(g):
        return [(t, g) for t in terms if t.requires_grad]
    return _make(data, "add_n", tuple(terms), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, g))
        if b.requires_grad:
            out.append((b, -g))
        return out
    return _make(a.data - b.data, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, g * b.data))
        if b.requires_grad:
            out.append((b, g * a.data))
        return out
    return _make(a.data * b.data, "mul", (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        return [(a, g * c)]
    return _make(a.data * c, "scale", (a,), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return [(a, -g)]
    return _make(-a.data, "neg", (a,), bwd)


def mul_const(a: Tensor, c) -> Tensor:
    c = _as_f64(c)
    def bwd(g):
        return [(a, g * c)]
    return _make(a.data * c, "mul_const", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    def bwd(g):
        return [(a, g * mask)]
    return _make(a.data * mask, "relu", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    def bwd(g):
        return [(a, g * out_data)]
    return _make(out_data, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        return [(a, g / a.data)]
    return _make(np.log(a.data), "log", (a,), bwd)


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    def bwd(g):
        return [(a, g * mask)]
    return _make(data, "clip", (a,), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data
    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, g * take_a))
        if b.requires_grad:
            out.append((b, g * ~take_a))
        return out
    return _make(np.where(take_a, a.data, b.data), "minimum", (a, b), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        return [(a, np.full_like(a.data, float(g)))]
    return _make(np.asarray(a.data.sum()), "sum_all", (a,), bwd)


def dot_const(a: Tensor, w) -> Tensor:
    w = _as_f64(w)
    def bwd(g):
        return [(a, float(g) * w)]
    return _make(np.asarray((a.data * w).sum()), "dot_const", (a,), bwd)


# --------------------------------------------------------------------------
# shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, g @ b.data.T))
        if b.requires_grad:
            out.append((b, a.data.T @ g))
        return out
    return _make(a.data @ b.data, "matmul", (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(g):
        return [(a, g.T)]
    return _make(a.data.T, "transpose", (a,), bwd)


def row(a: Tensor, i: int) -> Tensor:
    def bwd(g):
        z = np.zeros_like(a.data)
        z[i] = g
        return [(a, z)]
    return _make(a.data[i], "row", (a,), bwd)


def rows(a: Tensor, lo: int, hi: int) -> Tensor:
    def bwd(g):
        z = np.zeros_like(a.data)
        z[lo:hi] = g
        return [(a, z)]
    return _make(a.data[lo:hi], "rows", (a,), bwd)


def cols(a: Tensor, lo: int, hi: int) -> Tensor:
    def bwd(g):
        z = np.zeros_like(a.data)
        z[:, lo:hi] = g
        return [(a, z)]
    return _make(a.data[:, lo:hi], "cols", (a,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    mats = [p.data if p.data.ndim == 2 else p.data.reshape(1, -1) for p in parts]
    offsets = np.cumsum([0] + [m.shape[0] for m in mats])
    def bwd(g):
        out = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                piece = g[lo:hi]
                out.append((p, piece.reshape(p.data.shape)))
        return out
    return _make(np.vstack(mats), "concat_rows", tuple(parts), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])
    def bwd(g):
        out = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                out.append((p, g[:, lo:hi]))
        return out
    return _make(np.hstack([p.data for p in parts]), "concat_cols", tuple(parts), bwd)


def embed_rows(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    def bwd(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return [(table, z)]
    return _make(table.data[ids], "embed_rows", (table,), bwd)


def gather(v: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    def bwd(g):
        z = np.zeros_like(v.data)
        np.add.at(z, ids, g)
        return [(v, z)]
    return _make(v.data[ids], "gather", (v,), bwd)


# --------------------------------------------------------------------------
# normalization and loss ops

def rmsnorm(x: Tensor, s: Tensor, eps: float = 1e-6) -> Tensor:
    out_data, inv = rmsnorm_array(x.data, s.data, eps)
    n = x.data.shape[-1]
    def bwd(g):
        du = g * s.data
        out = []
        if x.requires_grad:
            dot = (du * x.data).sum(axis=-1, keepdims=True)
            out.append((x, inv * (du - x.data * dot * (inv * inv / n))))
        if s.requires_grad:
            gs = g * x.data * inv
            out.append((s, gs.sum(axis=0) if gs.ndim == 2 else gs))
        return out
    return _make(out_data, "rmsnorm", (x, s), bwd)


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    out_data = softmax_array(z.data, axis=axis)
    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return [(z, (g - dot) * out_data)]
    return _make(out_data, "softmax", (z,), bwd)


def causal_softmax(scores: Tensor) -> Tensor:
    out_data = causal_softmax_array(scores.data)
    def bwd(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        return [(scores, (g - dot) * out_data)]
    return _make(out_data, "causal_softmax", (scores,), bwd)


def soft_xent(z: Tensor, target, support) -> Tensor:
    """Cross-entropy of a probability vector against the full softmax of z.

    ``target`` lives on ``support`` (vocabulary ids); it is implicitly zero
    elsewhere, with the 0*log 0 = 0 convention. The gradient with respect
    to the logits is softmax(z) - target scattered over the vocabulary.
    """
    t = _as_f64(target)
    sup = np.asarray(support, dtype=np.int64)
    if sup.size == 0:
        raise ValueError("empty distribution")
    if t.shape != sup.shape:
        raise ValueError("target and support length mismatch")
    if t.min() < 0.0 or abs(t.sum() - 1.0) > 1e-6:
        raise ValueError("target not on simplex")
    m = z.data.max()
    e = np.exp(z.data - m)
    lse = m + np.log(e.sum())
    value = -(t * (z.data[sup] - lse)).sum()
    p = e / e.sum()
    def bwd(g):
        full = np.zeros_like(z.data)
        full[sup] = t
        return [(z, (p - full) * float(g))]
    return _make(np.asarray(value), "soft_xent", (z,), bwd)


def cross_entropy_rows(z: Tensor, ids) -> Tensor:
    """Mean next-token cross-entropy of logit rows against hard target ids."""
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.size
    if n == 0:
        raise ValueError("empty distribution")
    m = z.data.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z.data - m).sum(axis=1, keepdims=True))
    picked = z.data[np.arange(n), ids]
    value = (lse.ravel() - picked).mean()
    def bwd(g):
        grad = np.exp(z.data - lse)
        grad[np.arange(n), ids] -= 1.0
        return [(z, grad * (float(g) / n))]
    return _make(np.asarray(value), "cross_entropy_rows", (z,), bwd)


# --------------------------------------------------------------------------
# finite-difference gradient checking

def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between taped and central-difference gradients.

    Per coordinate: |analytic - central| / (|central| + 1e-12), maximized
    over all coordinates of ``point``. ``f`` must rebuild its graph from
    ``point.data`` on every call; the data is perturbed in place and
    restored before returning.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not point.requires_grad:
        raise ValueError("point must require grad")
    point.zero_grad()
    out = f(point)
    backward(out)
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    base = np.array(point.data, order="C", copy=True)
    fd = np.zeros(point.data.size)
    base_flat = base.reshape(-1)
    # point.data.flat writes through regardless of memory layout;
    # reshape(-1) would silently copy a non-contiguous array.
    for i in range(point.data.size):
        point.data.flat[i] = base_flat[i] + step
        fp = float(f(point).data)
        point.data.flat[i] = base_flat[i] - step
        fm = float(f(point).data)
        point.data.flat[i] = base_flat[i]
        fd[i] = (fp - fm) / (2.0 * step)
    point.data[...] = base
    fd = fd.reshape(point.data.shape)
    err = np.abs(analytic - fd) / (np.abs(fd) + 1e-12)
    return float(err.max())
