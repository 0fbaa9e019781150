"""Tape-based reverse-mode differentiation over numpy arrays.

Forward computation goes through the kernels in :mod:`vxl.numerics` (so
multiply-add instrumentation sees exactly the forward matmuls); backward
closures use raw numpy and are never counted.  Gradients are returned as
a dict keyed by leaf tensors instead of being written into shared state,
which keeps concurrent evaluations independent.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import numerics
from .errors import ShapeError, VocabError

# per-thread so concurrent no-grad evaluations cannot clobber each other
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """An array plus, when tracking is on, its place in the tape."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_needs")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp
        self._needs = requires_grad or any(p._needs for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def param(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def const(data) -> Tensor:
    return Tensor(np.asarray(data))


def _track(*parents) -> bool:
    return _grad_enabled() and any(p._needs for p in parents)


def _out(data, parents, vjp_builder):
    if _track(*parents):
        return Tensor(data, parents=parents, vjp=vjp_builder())
    return Tensor(data)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add mismatch: {a.data.shape} vs {b.data.shape}")
    return _out(a.data + b.data, (a, b), lambda: lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul mismatch: {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return _out(ad * bd, (a, b), lambda: lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _out(a.data * c, (a,), lambda: lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor, counter=None, label=None) -> Tensor:
    out = numerics.matmul(a.data, b.data, counter, label)
    ad, bd = a.data, b.data

    def make():
        def vjp(g):
            ga = g @ bd.T if a._needs else None
            gb = ad.T @ g if b._needs else None
            return ga, gb
        return vjp

    return _out(out, (a, b), make)


def bmm(a: Tensor, b: Tensor, counter=None, label=None, transpose_b=False) -> Tensor:
    bd = b.data.transpose(0, 2, 1) if transpose_b else b.data
    out = numerics.bmm(a.data, bd, counter, label)
    ad = a.data

    def make():
        def vjp(g):
            ga = np.matmul(g, bd.transpose(0, 2, 1)) if a._needs else None
            if b._needs:
                gb = np.matmul(ad.transpose(0, 2, 1), g)
                if transpose_b:
                    gb = gb.transpose(0, 2, 1)
            else:
                gb = None
            return ga, gb
        return vjp

    return _out(out, (a, b), make)


def concat0(parts: list[Tensor]) -> Tensor:
    parts = [p for p in parts if p.data.shape[0] > 0] or parts[:1]
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def make():
        def vjp(g):
            out, at = [], 0
            for p, s in zip(parts, sizes):
                out.append(g[at:at + s] if p._needs else None)
                at += s
            return tuple(out)
        return vjp

    return _out(data, tuple(parts), make)


def gather0(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows; indices must be unique."""
    idx = np.asarray(idx, dtype=np.intp)

    def make():
        def vjp(g):
            ga = np.zeros_like(a.data)
            ga[idx] = g
            return (ga,)
        return vjp

    return _out(a.data[idx], (a,), make)


def scatter0(a: Tensor, idx: np.ndarray, length: int) -> Tensor:
    """Place rows of ``a`` at ``idx`` inside a zero block of ``length`` rows."""
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((length,) + a.data.shape[1:], dtype=a.data.dtype)
    data[idx] = a.data
    return _out(data, (a,), lambda: lambda g: (g[idx],))


def repeat_row(a: Tensor, n: int) -> Tensor:
    """Tile a (1, D) row n times; gradient sums over the copies."""
    if a.data.shape[0] != 1:
        raise ShapeError(f"repeat_row needs a single row, got {a.data.shape}")
    data = np.repeat(a.data, n, axis=0)
    return _out(data, (a,), lambda: lambda g: (g.sum(axis=0, keepdims=True),))


def split_heads(a: Tensor, h: int) -> Tensor:
    """(L, h*d) -> (h, L, d)."""
    L, hd = a.data.shape
    d = hd // h
    data = a.data.reshape(L, h, d).transpose(1, 0, 2)
    return _out(data, (a,), lambda: lambda g: (g.transpose(1, 0, 2).reshape(L, hd),))


def merge_heads(a: Tensor) -> Tensor:
    """(h, L, d) -> (L, h*d)."""
    h, L, d = a.data.shape
    data = a.data.transpose(1, 0, 2).reshape(L, h * d)
    return _out(data, (a,), lambda: lambda g: (g.reshape(L, h, d).transpose(1, 0, 2),))


def repeat_heads(a: Tensor, rep: int) -> Tensor:
    """(hk, L, d) -> (hk*rep, L, d), grouped-query key/value sharing."""
    if rep == 1:
        return a
    hk, L, d = a.data.shape
    data = np.repeat(a.data, rep, axis=0)
    return _out(data, (a,), lambda: lambda g: (g.reshape(hk, rep, L, d).sum(axis=1),))


def rope(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate half-split feature pairs of (h, L, d) by per-position angles."""
    d = a.data.shape[-1]
    half = d // 2
    x1, x2 = a.data[..., :half], a.data[..., half:]
    data = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def make():
        def vjp(g):
            g1, g2 = g[..., :half], g[..., half:]
            return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)
        return vjp

    return _out(data, (a,), make)


def add_const(a: Tensor, m: np.ndarray) -> Tensor:
    return _out(a.data + m, (a,), lambda: lambda g: (g,))


def softmax_last(a: Tensor) -> Tensor:
    s = numerics.softmax_rows(a.data)
    return _out(s, (a,), lambda: lambda g: (s * (g - np.sum(g * s, axis=-1, keepdims=True)),))


def rms_norm_op(x: Tensor, gain: Tensor) -> Tensor:
    xd = x.data
    gd = gain.data.reshape(-1)
    D = xd.shape[-1]
    ms = np.mean(xd * xd, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + numerics.RMS_EPS ** 2)
    out = xd * r * gd

    def make():
        def vjp(g):
            gg = g * gd
            gx = gg * r - xd * (r ** 3 / D) * np.sum(gg * xd, axis=-1, keepdims=True) \
                if x._needs else None
            ggain = np.sum(g * xd * r, axis=tuple(range(xd.ndim - 1))) if gain._needs else None
            return gx, ggain
        return vjp

    return _out(out, (x, gain), make)


def silu_op(x: Tensor, counter=None) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    if counter is not None:
        counter.add_activations(x.data.size)
    return _out(out, (x,), lambda: lambda g: (g * sig * (1.0 + x.data * (1.0 - sig)),))


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise VocabError(f"token id out of range [0, {table.data.shape[0]})")
    data = table.data[ids]

    def make():
        def vjp(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            return (gt,)
        return vjp

    return _out(data, (table,), make)


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row logits."""
    t = np.asarray(targets, dtype=np.intp)
    ld = logits.data
    if ld.ndim != 2 or ld.shape[0] != t.shape[0]:
        raise ShapeError(f"cross_entropy mismatch: logits {ld.shape}, targets {t.shape}")
    if t.size == 0:
        return _out(np.float64(0.0), (logits,), lambda: lambda g: (np.zeros_like(ld),))
    if t.min() < 0 or t.max() >= ld.shape[1]:
        raise VocabError(f"target id out of range [0, {ld.shape[1]})")
    mx = ld.max(axis=1, keepdims=True)
    z = ld - mx
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    losses = (lse - z[np.arange(t.shape[0]), t][:, None]).reshape(-1)
    loss = np.float64(losses.mean())
    n = t.shape[0]

    def make():
        def vjp(g):
            p = np.exp(z - lse)
            p[np.arange(n), t] -= 1.0
            return (p * (float(g) / n),)
        return vjp

    return _out(loss, (logits,), make)


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse accumulation from ``root``; returns grads for leaf params."""
    topo: list[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen or not node._needs:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._needs and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            prev = leaves.get(node)
            leaves[node] = g if prev is None else prev + g
        if node._vjp is None:
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p._needs:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return leaves
