"""Dense float64 tensors with tape-based reverse-mode differentiation.

A ``Graph`` is an append-only tape: each recorded node stores an operation
tag, the indices of its parents, the cached forward value, and a closure
that maps the output cotangent to parent cotangents.  Insertion order is
topological order by construction, so ``backward`` is a single reverse
sweep.  The intended lifetime is one graph per training step.

Ops run in two modes: with an active graph (``with Graph():``) every
operation is recorded and any plain tensor touched by an op becomes a leaf;
with no active graph, ops are plain numpy evaluation.

Broadcasting follows the trailing-axis rule: shapes align from the right
and an extent of 1 stretches to match the other operand.
"""

import math

import numpy as np

from . import backend


class Node:
    __slots__ = ("tag", "parents", "value", "vjp", "leaf_ref")

    def __init__(self, tag, parents, value, vjp, leaf_ref=None):
        self.tag = tag
        self.parents = parents
        self.value = value
        self.vjp = vjp
        self.leaf_ref = leaf_ref


class Graph:
    """Append-only computation tape; use as a context manager."""

    _active = []

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        Graph._active.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Graph._active.pop()
        return False

    @staticmethod
    def current():
        return Graph._active[-1] if Graph._active else None

    def add(self, tag, parents, value, vjp, leaf_ref=None):
        self.nodes.append(Node(tag, parents, value, vjp, leaf_ref))
        return len(self.nodes) - 1


class Tensor:
    """A float64 array plus an optional handle into the active graph."""

    __slots__ = ("value", "name", "grad", "_graph", "_node")

    def __init__(self, value, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name
        self.grad = None
        self._graph = None
        self._node = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    def _node_in(self, g):
        # Lazily register as a leaf of graph g.
        if self._graph is not g:
            self._graph = g
            self._node = g.add("leaf", (), self.value, None, leaf_ref=self)
        return self._node

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"

    # operator sugar; scalars and ndarrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return take(self, key)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(tag, value, parents, vjp):
    out = Tensor(value)
    g = Graph.current()
    if g is not None:
        pids = tuple(p._node_in(g) for p in parents)
        out._graph = g
        out._node = g.add(tag, pids, out.value, vjp)
    return out


def _unbroadcast(g, shape):
    """Sum a cotangent down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root):
    """Reverse sweep from a scalar root; returns {leaf tensor: gradient}.

    Every leaf of the root's graph gets a gradient (zeros when the leaf does
    not reach the root); the arrays are also stored on each leaf's ``.grad``.
    """
    if root._graph is None:
        raise ValueError("backward: root is not attached to a graph")
    if root.value.size != 1:
        raise ValueError(
            f"backward: root must be scalar, got shape {root.value.shape}"
        )
    g = root._graph
    grads = [None] * len(g.nodes)
    grads[root._node] = np.ones_like(root.value)
    for nid in range(root._node, -1, -1):
        gout = grads[nid]
        node = g.nodes[nid]
        if gout is None or node.vjp is None:
            continue
        for pid, contrib in zip(node.parents, node.vjp(gout)):
            if contrib is None:
                continue
            if grads[pid] is None:
                grads[pid] = contrib
            else:
                grads[pid] = grads[pid] + contrib
    out = {}
    for node in g.nodes:
        leaf = node.leaf_ref
        if leaf is not None:
            gl = grads[leaf._node]
            leaf.grad = np.zeros_like(leaf.value) if gl is None else gl
            out[leaf] = leaf.grad
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    out = av + bv

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return _record("add", out, (a, b), vjp)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    out = av - bv

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return _record("sub", out, (a, b), vjp)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    out = av * bv

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record("mul", out, (a, b), vjp)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        return (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        )

    return _record("div", out, (a, b), vjp)


def neg(a):
    a = _wrap(a)

    def vjp(g):
        return (-g,)

    return _record("neg", -a.value, (a,), vjp)


def exp(a):
    a = _wrap(a)
    out = np.exp(a.value)

    def vjp(g):
        return (g * out,)

    return _record("exp", out, (a,), vjp)


def log(a):
    a = _wrap(a)
    av = a.value

    def vjp(g):
        return (g / av,)

    return _record("log", np.log(av), (a,), vjp)


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.value)

    def vjp(g):
        return (g * (0.5 / out),)

    return _record("sqrt", out, (a,), vjp)


def relu(a):
    a = _wrap(a)
    av = a.value
    mask = av > 0.0

    def vjp(g):
        return (g * mask,)

    return _record("relu", av * mask, (a,), vjp)


def sigmoid(a):
    a = _wrap(a)
    av = a.value
    # stable in both tails
    out = np.where(av >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(av))),
                   np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (a,), vjp)


def softplus(a):
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|))."""
    a = _wrap(a)
    av = a.value
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    sig = np.where(av >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(av))),
                   np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av))))

    def vjp(g):
        return (g * sig,)

    return _record("softplus", out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(a, shape):
    a = _wrap(a)
    old = a.value.shape

    def vjp(g):
        return (g.reshape(old),)

    return _record("reshape", a.value.reshape(shape), (a,), vjp)


def _is_basic_index(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(
        isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis
        for p in parts
    )


def take(a, key):
    """Indexing/slicing; the cotangent scatters back into zeros."""
    a = _wrap(a)
    av = a.value
    out = av[key]

    def vjp(g):
        ga = np.zeros_like(av)
        if _is_basic_index(key):
            ga[key] += g
        else:
            np.add.at(ga, key, g)
        return (ga,)

    return _record("take", out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    vals = [t.value for t in tensors]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    av = a.value
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    av = a.value
    out = av.mean(axis=axis, keepdims=keepdims)
    n = av.size if axis is None else av.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, av.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, av.shape).copy(),)

    return _record("mean", out, (a,), vjp)


def sum_sq(a, b=None):
    """Sum of squares of ``a`` or, given ``b``, of the difference ``a - b``."""
    a = _wrap(a)
    if b is None:
        av = a.value
        out = np.array((av * av).sum())

        def vjp(g):
            return (g * 2.0 * av,)

        return _record("sum_sq", out, (a,), vjp)
    b = _wrap(b)
    if a.value.shape != b.value.shape:
        raise ValueError(
            f"sum_sq: shapes differ {a.value.shape} vs {b.value.shape}"
        )
    d = a.value - b.value
    out = np.array((d * d).sum())

    def vjp(g):
        gd = g * 2.0 * d
        return gd, -gd

    return _record("sum_sq", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b, row_stable=False):
    """Matrix product a @ b.

    With ``row_stable=True`` the forward pass reduces each output element
    independently over the inner axis (broadcast-multiply then sum), which
    keeps row contents bit-identical under row permutations of ``a``; plain
    BLAS does not guarantee that.  Backward always uses BLAS.
    """
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    if row_stable:
        out = (av[:, :, None] * bv[None, :, :]).sum(axis=1)
    else:
        out = av @ bv

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", out, (a, b), vjp)


def softmax(a, axis=-1):
    """Shift-invariant softmax along ``axis``; rows sum to 1."""
    a = _wrap(a)
    av = a.value
    e = np.exp(av - av.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record("softmax", out, (a,), vjp)


# ---------------------------------------------------------------------------
# fused kernels (attention, volumetric compositing)


def attention(q, k, v, scale=None):
    """softmax(q kᵀ · scale) v with exactly-rounded token-axis reductions.

    The scores, softmax denominators, and probability-weighted sums are
    computed so that permuting the rows of ``k``/``v`` (and correspondingly
    the columns of the score matrix) changes no output bit: per-element
    score dots, max, and exactly-rounded sums are all order-independent.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    qv, kv, vv = q.value, k.value, v.value
    if qv.ndim != 2 or kv.ndim != 2 or vv.ndim != 2:
        raise ValueError("attention: q, k, v must be rank 2")
    if qv.shape[1] != kv.shape[1]:
        raise ValueError(
            f"attention: key width mismatch {qv.shape} vs {kv.shape}"
        )
    if kv.shape[0] != vv.shape[0]:
        raise ValueError(
            f"attention: k and v row counts differ {kv.shape} vs {vv.shape}"
        )
    if scale is None:
        scale = 1.0 / math.sqrt(qv.shape[1])
    # each score is its own fixed-order reduction over the key width
    s = (qv[:, None, :] * kv[None, :, :]).sum(axis=2) * scale
    e = np.exp(s - s.max(axis=1, keepdims=True))
    denom = backend.exact_rowsum(e)
    p = e / denom[:, None]
    out = backend.exact_weighted_rows(p, vv)

    def vjp(g):
        gv = p.T @ g
        gp = g @ vv.T
        gs = p * (gp - (gp * p).sum(axis=1, keepdims=True))
        gq = (gs @ kv) * scale
        gk = (gs.T @ qv) * scale
        return gq, gk, gv

    return _record("attention", out, (q, k, v), vjp)


def composite(sigma, delta, rgb, background):
    """Emission-absorption compositing along rays.

    Parameters are per-ray samples: densities ``sigma`` (R, S), segment
    lengths ``delta`` (R, S), colors ``rgb`` (R, S, 3), and a background
    color (3,).  Returns ``(pixel, opacity)`` where
    ``pixel = sum_i T_i alpha_i rgb_i + T_final * background`` with
    ``alpha_i = 1 - exp(-sigma_i delta_i)`` and exclusive transmittance
    ``T_i = prod_{j<i} (1 - alpha_j)``.
    """
    sigma, rgb = _wrap(sigma), _wrap(rgb)
    delta = np.asarray(delta, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    sv, cv = sigma.value, rgb.value
    if sv.ndim != 2 or cv.shape != sv.shape + (3,) or delta.shape != sv.shape:
        raise ValueError(
            f"composite: sigma {sv.shape}, delta {delta.shape}, rgb {cv.shape}"
        )
    sd = sv * delta
    om = np.exp(-sd)
    alpha = -np.expm1(-sd)
    pixel, opacity, w = backend.composite_scan(om, alpha, cv, bg)

    zeros3 = np.zeros(3)

    def vjp_pixel(g):
        gs, gc = backend.composite_scan_backward(
            np.ascontiguousarray(g), np.zeros(sv.shape[0]), delta, cv, bg, om, w
        )
        return gs, gc

    def vjp_opacity(g):
        gs, _ = backend.composite_scan_backward(
            np.zeros((sv.shape[0], 3)), np.ascontiguousarray(g), delta, cv,
            zeros3, om, w
        )
        return gs, None

    out_pixel = _record("composite.pixel", pixel, (sigma, rgb), vjp_pixel)
    out_opacity = _record("composite.opacity", opacity, (sigma, rgb), vjp_opacity)
    return out_pixel, out_opacity
