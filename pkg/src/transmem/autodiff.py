"""Reverse-mode automatic differentiation over :mod:`tensor_core`.

A :class:`Var` records the operation that produced it. Graphs are built
afresh on every forward pass and discarded after :func:`backward`; nodes that
do not depend on any trainable leaf carry no backward closure at all, so
running frozen models through these ops costs nothing extra.
"""
import itertools

import numpy as np

from . import tensor_core as tc
from .errors import ShapeError, UsageError

_ids = itertools.count()


class Var:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "name", "id", "grad", "op")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None, op="leaf"):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self.id = next(_ids)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        if np.isscalar(other):
            return add_scalar(neg(self), other)
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def parameter(value, name=None):
    return Var(np.asarray(value, dtype=np.float64), requires_grad=True, name=name, op="param")


def constant(value):
    return Var(np.asarray(value, dtype=np.float64), op="const")


def stop_gradient(v):
    """Cut the graph: the result carries ``v``'s value but no history."""
    return Var(v.value, op="stop_gradient")


def _wrap(x):
    return x if isinstance(x, Var) else constant(x)


def _node(value, parents, backward_fn, op):
    if any(p.requires_grad for p in parents):
        return Var(value, parents, backward_fn, True, op=op)
    return Var(value, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- pointwise ----------------------------------------------------------------

def add(a, b):
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def neg(a):
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, s):
    s = float(s)
    return _node(a.value * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a, s):
    return _node(a.value + s, (a,), lambda g: (g,), "add_scalar")


def add_n(vs):
    vs = list(vs)
    if len(vs) == 1:
        return vs[0]
    total = vs[0].value
    for v in vs[1:]:
        total = total + v.value
    return _node(total, tuple(vs), lambda g: (g,) * len(vs), "add_n")


def sigmoid(a):
    out = tc.sigmoid(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp(a, lo, hi):
    out = np.clip(a.value, lo, hi)
    inside = (a.value > lo) & (a.value < hi)
    return _node(out, (a,), lambda g: (g * inside,), "clamp")


# -- structural -----------------------------------------------------------------

def slice_channels(a, start, stop):
    """``a[:, start:stop]`` on a batched ``(B, C, ...)`` tensor."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _node(a.value[:, start:stop], (a,), back, "slice")


def concat(vs, axis=0):
    vs = list(vs)
    sizes = np.cumsum([v.shape[axis] for v in vs])[:-1]
    return _node(np.concatenate([v.value for v in vs], axis=axis), tuple(vs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def repeat_channels(a, times):
    """Tile ``(B, C, ...)`` to ``(B, times*C, ...)``."""
    b, c = a.shape[:2]
    reps = (1, times) + (1,) * (a.value.ndim - 2)
    return _node(np.tile(a.value, reps), (a,),
                 lambda g: (g.reshape(b, times, c, *a.shape[2:]).sum(axis=1),), "repeat")


def group_sum(a, groups):
    """Sum ``(B, groups*C, ...)`` over its channel groups -> ``(B, C, ...)``."""
    b, gc = a.shape[:2]
    c = gc // groups
    rest = a.shape[2:]
    out = a.value.reshape(b, groups, c, *rest).sum(axis=1)
    return _node(out, (a,), lambda g: (np.tile(g, (1, groups) + (1,) * len(rest)),), "group_sum")


def space_to_depth(a, factor):
    return _node(tc.space_to_depth(a.value, factor), (a,),
                 lambda g: (tc.depth_to_space(g, factor),), "space_to_depth")


def depth_to_space(a, factor):
    return _node(tc.depth_to_space(a.value, factor), (a,),
                 lambda g: (tc.space_to_depth(g, factor),), "depth_to_space")


# -- layers ---------------------------------------------------------------------

def conv2d(x, w, b=None):
    """Batched same-padded convolution, ``x`` is ``(B, C, H, W)``."""
    if x.value.ndim != 4:
        raise ShapeError("conv2d input must be (B, C, H, W)", None, x.shape)
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d input channels vs kernel", (w.shape[1],), (x.shape[1],))
    out, cols = tc.conv2d_with_cols(x.value, w.value, None if b is None else b.value)

    def back(g):
        gx, gw, gb = tc.conv2d_backward(g, x.value, w.value, need_input=x.requires_grad, cols=cols)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, back, "conv2d")


def layer_norm(x, gain, shift, epsilon=1e-5, groups=1):
    tc._check_eps(epsilon)
    bsz = x.shape[0]
    xg = x.value.reshape(bsz, groups, -1)
    n = xg.shape[2]
    mean = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + epsilon)
    xhat = (xg - mean) * inv
    bshape = (1, -1) + (1,) * (x.value.ndim - 2)
    xhat_full = xhat.reshape(x.shape)
    out = xhat_full * gain.value.reshape(bshape) + shift.value.reshape(bshape)
    red = (0,) + tuple(range(2, x.value.ndim))

    def back(g):
        dxhat = (g * gain.value.reshape(bshape)).reshape(bsz, groups, n)
        dx = inv / n * (n * dxhat - dxhat.sum(axis=2, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=2, keepdims=True))
        return dx.reshape(x.shape), (g * xhat_full).sum(axis=red), g.sum(axis=red)

    return _node(out, (x, gain, shift), back, "layer_norm")


# -- reductions -------------------------------------------------------------------

def total(a):
    return _node(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def squared_error(a, b):
    """Sum of squared differences per sample, averaged over the batch axis."""
    if a.shape != b.shape:
        raise ShapeError("squared_error operands", a.shape, b.shape)
    d = a.value - b.value
    bsz = d.shape[0]
    out = np.asarray(np.einsum("i,i->", d.ravel(), d.ravel()) / bsz)

    def back(g):
        gd = (2.0 * g / bsz) * d
        return gd, -gd

    return _node(out, (a, b), back, "squared_error")


# -- backward ---------------------------------------------------------------------

def backward(loss, params=None):
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf.

    Returns a map from leaf name to gradient. With ``params`` (a name -> Var
    mapping), every listed parameter gets an entry, zero when unreachable.
    """
    if loss.value.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    nodes = {}
    stack = [loss] if loss.requires_grad else []
    while stack:
        v = stack.pop()
        if v.id in nodes:
            continue
        nodes[v.id] = v
        stack.extend(p for p in v.parents if p.requires_grad and p.id not in nodes)
    grads = {loss.id: np.ones_like(loss.value)}
    result = {}
    for vid in sorted(nodes, reverse=True):
        v = nodes[vid]
        g = grads.pop(vid, None)
        if g is None:
            continue
        if v.backward_fn is None:
            v.grad = g if v.grad is None else v.grad + g
            if v.name is not None:
                result[v.name] = g
            continue
        for p, pg in zip(v.parents, v.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else prev + pg
    if params is not None:
        for name, p in params.items():
            if name not in result:
                result[name] = np.zeros_like(p.value)
    return result


def numeric_gradients(f, params, step=1e-5, coords=None):
    """Central-difference gradients of ``f`` at ``params``.

    Returns ``{name: (flat_indices, values)}``; ``coords`` restricts the
    probed flat indices per parameter (default: all of them).
    """
    out = {}
    for name, base in params.items():
        idx = np.arange(base.size) if coords is None else np.asarray(coords.get(name, ()), dtype=np.int64)
        vals = np.empty(len(idx))
        for j, i in enumerate(idx):
            fx = []
            for sign in (1.0, -1.0):
                probe = dict(params)
                probe[name] = base.copy()
                probe[name].flat[i] += sign * step
                fx.append(float(f({k: constant(v) for k, v in probe.items()}).value))
            vals[j] = (fx[0] - fx[1]) / (2.0 * step)
        out[name] = (idx, vals)
    return out


def gradient_errors(f, params, step=1e-5, analytic=None, coords=None):
    """Per-parameter agreement of analytic and central-difference gradients.

    Returns ``{name: (tensor_rel, worst_elem_rel)}`` where ``tensor_rel`` is
    ``|a - n| / max(|a|, |n|)`` over the probed coordinates (2-norms) and
    ``worst_elem_rel`` the largest per-coordinate ratio with a 1e-8 floor.
    """
    if analytic is None:
        pv = {k: parameter(v.copy(), name=k) for k, v in params.items()}
        analytic = backward(f(pv), pv)
    errors = {}
    for name, (idx, num) in numeric_gradients(f, params, step, coords).items():
        if len(idx) == 0:
            continue
        ana = np.asarray(analytic[name]).ravel()[idx]
        diff = np.abs(ana - num)
        scale = max(np.linalg.norm(ana), np.linalg.norm(num))
        tensor_rel = float(np.linalg.norm(diff) / scale) if scale > 0 else 0.0
        elem = diff / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        errors[name] = (tensor_rel, float(elem.max()))
    return errors


def finite_diff_check(f, params, step=1e-5, analytic=None, coords=None):
    """Worst per-coordinate relative disagreement between analytic and
    central-difference gradients (denominator floored at 1e-8).

    ``f`` maps a dict of ``Var`` parameters to a scalar ``Var``. ``params`` is
    a dict of arrays. ``analytic`` optionally supplies the gradients to test
    (defaults to :func:`backward`); ``coords`` optionally maps names to flat
    indices to restrict the check.
    """
    errors = gradient_errors(f, params, step, analytic, coords)
    return max((e[1] for e in errors.values()), default=0.0)
