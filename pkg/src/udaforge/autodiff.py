"""Reverse-mode automatic differentiation over dense float64 arrays.

The tape is eager: every operation computes its value immediately and keeps
per-parent vector-Jacobian closures. Backward passes express their results
through the same differentiable operations, so a gradient is itself a tape
node and can be differentiated again. That second-order path is what the
critic's gradient penalty needs; everything else only ever uses first order.
"""

from __future__ import annotations

import weakref

import numpy as np


class NumericFault(ArithmeticError):
    """An operation produced NaN or Inf."""


class Var:
    """One tape node: a float64 array plus per-parent backward closures.

    vjp is a tuple aligned with parents; grad() invokes an entry only when
    that parent can still reach a requested leaf. Closures must not capture
    their own node directly (the cycle would defeat refcounting and stall
    training on gc passes); ops that reuse their output in the backward rule
    hold it through a weakref, which is safe because the backward walk keeps
    every node alive while it runs.
    """

    __slots__ = ("data", "parents", "vjp", "__weakref__")

    def __init__(self, data, parents=(), vjp=None, check=True):
        d = np.asarray(data, dtype=np.float64)
        if check and not np.isfinite(d).all():
            raise NumericFault("operation produced non-finite values")
        self.data = d
        self.parents = tuple(parents)
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Var(shape={self.data.shape})"

    # arithmetic sugar; scalars and ndarrays are lifted to constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, c):
        return pow_const(self, c)


def leaf(data):
    """A differentiable leaf (inputs, parameters)."""
    return Var(data)


def const(data):
    """A non-differentiable constant; never checked for finiteness."""
    return Var(data, check=False)


def _lift(x):
    return x if isinstance(x, Var) else const(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# elementwise ops


def _sum_to(g, shape):
    """Reduce a broadcast gradient back down to `shape`."""
    while g.data.ndim > len(shape):
        g = vsum(g, axis=0)
    axes = tuple(
        i for i, (gs, s) in enumerate(zip(g.data.shape, shape)) if s == 1 and gs != 1
    )
    if axes:
        g = vsum(g, axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _lift(a), _lift(b)
    out = Var(a.data + b.data, (a, b))
    out.vjp = (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(g, b.shape))
    return out


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out = Var(a.data - b.data, (a, b))
    out.vjp = (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(neg(g), b.shape))
    return out


def neg(a):
    a = _lift(a)
    out = Var(-a.data, (a,), check=False)
    out.vjp = (neg,)
    return out


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = Var(a.data * b.data, (a, b))
    out.vjp = (
        lambda g: _sum_to(mul(g, b), a.shape),
        lambda g: _sum_to(mul(g, a), b.shape),
    )
    return out


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = Var(a.data / b.data, (a, b))
    out.vjp = (
        lambda g: _sum_to(div(g, b), a.shape),
        lambda g: _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape),
    )
    return out


def pow_const(a, c):
    a = _lift(a)
    c = float(c)
    out = Var(a.data ** c, (a,))
    out.vjp = (lambda g: mul(g, mul(pow_const(a, c - 1.0), c)),)
    return out


def sqrt(a):
    a = _lift(a)
    out = Var(np.sqrt(a.data), (a,))
    ref = weakref.ref(out)
    out.vjp = (lambda g: div(g, mul(ref(), 2.0)),)
    return out


def exp(a):
    a = _lift(a)
    out = Var(np.exp(a.data), (a,))
    ref = weakref.ref(out)
    out.vjp = (lambda g: mul(g, ref()),)
    return out


def log(a):
    a = _lift(a)
    out = Var(np.log(a.data), (a,))
    out.vjp = (lambda g: div(g, a),)
    return out


def relu(a):
    a = _lift(a)
    mask = const((a.data > 0).astype(np.float64))
    out = Var(a.data * mask.data, (a,), check=False)
    out.vjp = (lambda g: mul(g, mask),)
    return out


def elu(a, alpha=1.0):
    a = _lift(a)
    alpha = float(alpha)
    x = a.data
    negm = x <= 0
    y = np.where(negm, alpha * np.expm1(np.minimum(x, 0.0)), x)
    out = Var(y, (a,))
    mask_pos = const((~negm).astype(np.float64))
    mask_neg = const(negm.astype(np.float64))
    ref = weakref.ref(out)

    def da(g):
        # on the negative branch d/dx = alpha*exp(x) = y + alpha
        slope = add(mask_pos, mul(mask_neg, add(ref(), alpha)))
        return mul(g, slope)

    out.vjp = (da,)
    return out


def tanh(a):
    a = _lift(a)
    out = Var(np.tanh(a.data), (a,))
    ref = weakref.ref(out)
    out.vjp = (lambda g: mul(g, sub(1.0, mul(ref(), ref()))),)
    return out


def sigmoid(a):
    a = _lift(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Var(y, (a,))
    ref = weakref.ref(out)
    out.vjp = (lambda g: mul(g, mul(ref(), sub(1.0, ref()))),)
    return out


# ---------------------------------------------------------------------------
# shape ops (pure data movement: no finiteness re-check)


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(shape)
    out = Var(a.data.reshape(shape), (a,), check=False)
    out.vjp = (lambda g: reshape(g, a.shape),)
    return out


def transpose(a, axes=None):
    a = _lift(a)
    out = Var(np.transpose(a.data, axes), (a,), check=False)
    inv = None if axes is None else tuple(np.argsort(axes))
    out.vjp = (lambda g: transpose(g, inv),)
    return out


def broadcast_to(a, shape):
    a = _lift(a)
    shape = tuple(shape)
    out = Var(np.broadcast_to(a.data, shape).copy(), (a,), check=False)
    out.vjp = (lambda g: _sum_to(g, a.shape),)
    return out


def vsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = Var(np.sum(a.data, axis=axis, keepdims=keepdims), (a,))

    def da(g):
        if axis is None:
            return broadcast_to(reshape(g, (1,) * a.ndim), a.shape)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % a.ndim for ax in axes)
        if keepdims:
            gk = g
        else:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
            gk = reshape(g, kshape)
        return broadcast_to(gk, a.shape)

    out.vjp = (da,)
    return out


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def narrow(a, axis, start, length):
    """Slice `length` entries along `axis` starting at `start`."""
    a = _lift(a)
    idx = tuple(
        slice(start, start + length) if i == axis % a.ndim else slice(None)
        for i in range(a.ndim)
    )
    out = Var(a.data[idx].copy(), (a,), check=False)
    out.vjp = (lambda g: embed(g, axis, start, a.shape),)
    return out


def embed(a, axis, start, shape):
    """Adjoint of narrow: place `a` into zeros of `shape` at `start`."""
    a = _lift(a)
    buf = np.zeros(shape, dtype=np.float64)
    idx = tuple(
        slice(start, start + a.shape[i]) if i == axis % len(shape) else slice(None)
        for i in range(len(shape))
    )
    buf[idx] = a.data
    out = Var(buf, (a,), check=False)
    out.vjp = (lambda g: narrow(g, axis, start, a.shape[axis % len(shape)]),)
    return out


def concat(parts, axis):
    parts = [_lift(p) for p in parts]
    out = Var(
        np.concatenate([p.data for p in parts], axis=axis), tuple(parts), check=False
    )
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def make(i, p):
        return lambda g: narrow(g, axis, int(offsets[i]), p.shape[axis])

    out.vjp = tuple(make(i, p) for i, p in enumerate(parts))
    return out


# ---------------------------------------------------------------------------
# linear algebra / convolution


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = Var(a.data @ b.data, (a, b))
    out.vjp = (
        lambda g: matmul(g, transpose(b)),
        lambda g: matmul(transpose(a), g),
    )
    return out


def _swap_last(v):
    axes = tuple(range(v.ndim - 2)) + (v.ndim - 1, v.ndim - 2)
    return transpose(v, axes)


def bmatmul(a, b):
    """Stacked matmul with numpy broadcasting over leading axes.

    Either operand may be 2-D (shared across the stack) or 3-D.
    """
    a, b = _lift(a), _lift(b)

    def da(g):
        r = bmatmul(g, _swap_last(b))
        return r if a.ndim == r.ndim else vsum(r, axis=0)

    def db(g):
        r = bmatmul(_swap_last(a), g)
        return r if b.ndim == r.ndim else vsum(r, axis=0)

    out = Var(a.data @ b.data, (a, b))
    out.vjp = (da, db)
    return out


def im2col(x, k):
    """Extract all k-by-k patches (same zero padding, stride 1).

    (B, C, H, W) -> (B, C*k*k, H*W), patch channel-major so no transpose
    copies are needed. Linear, with col2im as its adjoint.
    """
    x = _lift(x)
    b, c, h, w = x.shape
    q = k // 2
    p = np.zeros((b, c, h + 2 * q, w + 2 * q), dtype=np.float64)
    p[:, :, q : q + h, q : q + w] = x.data
    cols = np.empty((b, c, k, k, h, w), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = p[:, :, di : di + h, dj : dj + w]
    out = Var(cols.reshape(b, c * k * k, h * w), (x,), check=False)
    out.vjp = (lambda g: col2im(g, x.shape, k),)
    return out


def col2im(g, x_shape, k):
    """Adjoint of im2col: scatter-add patches back onto the image grid."""
    g = _lift(g)
    b, c, h, w = x_shape
    q = k // 2
    cols = np.ascontiguousarray(g.data).reshape(b, c, k, k, h, w)
    p = np.zeros((b, c, h + 2 * q, w + 2 * q), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            p[:, :, di : di + h, dj : dj + w] += cols[:, :, di, dj]
    out = Var(p[:, :, q : q + h, q : q + w].copy(), (g,), check=False)
    out.vjp = (lambda gg: im2col(gg, k),)
    return out


def conv2d(x, w):
    """Stride-1 same-padding convolution, odd square kernels only.

    x: (B, C_in, H, W), w: (C_out, C_in, k, k) -> (B, C_out, H, W).
    """
    x, w = _lift(x), _lift(w)
    b, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    if k != k2 or k % 2 == 0:
        raise ValueError("conv2d kernels must be square with odd size")
    cols = im2col(x, k)  # (B, C*k*k, H*W)
    wmat = reshape(w, (co, ci * k * k))
    y = bmatmul(wmat, cols)  # (B, C_out, H*W)
    return reshape(y, (b, co, h, wd))


def avgpool2(x):
    """2x2 average pooling; spatial extents must be even."""
    x = _lift(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("avgpool2 needs even spatial extents")
    out = Var(
        x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)),
        (x,),
        check=False,
    )
    out.vjp = (lambda g: unpool_avg2(g, (h, w)),)
    return out


def unpool_avg2(g, hw):
    """Adjoint of avgpool2: distribute each cell over its 2x2 block / 4."""
    g = _lift(g)
    h, w = hw
    up = np.repeat(np.repeat(g.data, 2, axis=2), 2, axis=3) * 0.25
    out = Var(up[:, :, :h, :w], (g,), check=False)
    out.vjp = (lambda gg: avgpool2(gg),)
    return out


def softmax(a, axis=1):
    """Row-stable softmax; the stabilising max is treated as a constant."""
    a = _lift(a)
    shift = const(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, vsum(e, axis=axis, keepdims=True))


def log_softmax(a, axis=1):
    a = _lift(a)
    shift = const(np.max(a.data, axis=axis, keepdims=True))
    z = sub(a, shift)
    return sub(z, log(vsum(exp(z), axis=axis, keepdims=True)))


# ---------------------------------------------------------------------------
# backward


def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order  # parents precede children


def grad(out, wrt, seed=None):
    """Gradients of `out` with respect to each Var in `wrt`.

    Results are tape nodes, so they can be fed back into grad() for
    second-order quantities. Vars unreachable from `out` get zeros. Branches
    of the graph that cannot reach any `wrt` leaf are never differentiated.
    """
    if seed is None:
        if out.data.size != 1:
            raise ValueError("grad of a non-scalar needs an explicit seed")
        seed = const(np.ones_like(out.data))
    order = _topo(out)
    needed = {id(w) for w in wrt}
    for node in order:  # parents first
        if id(node) in needed:
            continue
        if any(id(p) in needed for p in node.parents):
            needed.add(id(node))
    gmap = {id(out): seed}
    for node in reversed(order):
        g = gmap.get(id(node))
        if g is None or node.vjp is None:
            continue
        for p, fn in zip(node.parents, node.vjp):
            if fn is None or id(p) not in needed:
                continue
            pg = fn(g)
            acc = gmap.get(id(p))
            gmap[id(p)] = pg if acc is None else add(acc, pg)
    return [
        gmap[id(w)] if id(w) in gmap else const(np.zeros_like(w.data)) for w in wrt
    ]
