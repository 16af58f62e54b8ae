"""Dense float64 tensors with tape-based reverse-mode differentiation.

Usage::

    with Tape() as tape:
        w = Tensor(np.ones(3), requires_grad=True)
        loss = sum_(w * w)
    grads = tape.gradients(loss, {"w": w})

Operations only record onto the tape when at least one operand requires a
gradient; outside a tape they are plain numpy evaluations.
"""
import threading

import numpy as np
from scipy.special import erf

_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of primitive operations for reverse accumulation."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, out, parents, backward_fn):
        self.records.append((out, parents, backward_fn))

    def backward(self, loss):
        """Accumulate d(loss)/d(node) for every recorded node.

        Returns a dict keyed by ``id(tensor)``.  Each record is visited once,
        newest first.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, backward_fn in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for parent, pg in zip(parents, backward_fn(g)):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads

    def gradients(self, loss, params):
        """Gradients for a name -> Tensor mapping; unused params get zeros."""
        acc = self.backward(loss)
        out = {}
        for name, p in params.items():
            g = acc.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        return out


def backward(tape, loss, params):
    """Functional spelling of :meth:`Tape.gradients`."""
    return tape.gradients(loss, params)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sigmoid(x):
    x = _wrap(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact (erf) GELU."""
    x = _wrap(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def huber(pred, target, delta=1.0):
    """Elementwise Huber loss of ``pred - target``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    pred, target = _wrap(pred), _wrap(target)
    r = pred.data - target.data
    a = np.abs(r)
    quad = a <= delta
    val = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    dr = np.where(quad, r, delta * np.sign(r))
    return _make(val, (pred, target),
                 lambda g: (_unbroadcast(g * dr, pred.shape), _unbroadcast(-g * dr, target.shape)))


def dropout(x, p, rng, training):
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return x
    keep = 1.0 - p
    mask = (rng.random(x.shape, dtype=np.float32) < keep) / keep
    return mul(x, mask)


# reductions and shape ---------------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    x = _wrap(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = _wrap(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = _wrap(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs, axis):
    xs = [_wrap(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def broadcast_to(x, shape):
    x = _wrap(x)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x, idx):
    x = _wrap(x)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw)


def take_rows(x, index):
    """Gather along axis 0 (embedding lookup, batch subset)."""
    index = np.asarray(index, dtype=np.intp)
    return getitem(x, index)


def scatter_rows(x, index, n):
    """Inverse of take_rows: place rows of x at ``index`` in a zero array of n rows."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((n,) + x.shape[1:])
    out[index] = x.data
    return _make(out, (x,), lambda g: (g[index],))


# linear algebra -------------------------------------------------------------

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if b.ndim == 2 and a.ndim > 2:
        # stacked rows times one weight matrix: run as a single 2-D GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return ((g2 @ b.data.T).reshape(a.shape), a2.T @ g2)

        return _make(out, (a, b), bw2)

    def bw(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(g, a.data, axes=(list(range(g.ndim)), list(range(g.ndim))))
            return (ga, gb)
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (_unbroadcast(ga, a.shape), gb)

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# normalisation and attention -------------------------------------------------

def softmax(x, mask=None, axis=-1):
    """Max-stabilised softmax; ``mask`` False entries get exactly zero weight."""
    x = _wrap(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis with the population variance."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def multi_head_attention(q_in, k_in, v_in, params, heads, mask=None,
                         rng=None, p_drop=0.0, training=False):
    """Scaled dot-product attention over ``heads`` heads.

    ``q_in`` is (..., n_q, d); ``k_in``/``v_in`` are (..., n_k, d).  ``mask``
    broadcasts against (..., n_k) and marks attendable keys.  ``params``
    holds ``wq, bq, wk, wv, bv, wo, bo`` and optionally ``bk``.
    """
    d = q_in.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        t = reshape(t, t.shape[:-1] + (heads, dh))
        nd = t.ndim
        return transpose(t, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    q = split(linear(q_in, params["wq"], params["bq"]))
    k = split(linear(k_in, params["wk"], params.get("bk")))
    v = split(linear(v_in, params["wv"], params["bv"]))
    nd = k.ndim
    kt = transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = mul(matmul(q, kt), 1.0 / np.sqrt(dh))
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        m = m[..., None, None, :]  # (..., 1 head, 1 query, n_k)
    attn = softmax(scores, mask=m)
    if training and p_drop > 0.0:
        attn = dropout(attn, p_drop, rng, training)
    ctx = matmul(attn, v)
    nd = ctx.ndim
    ctx = transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    ctx = reshape(ctx, ctx.shape[:-2] + (d,))
    return linear(ctx, params["wo"], params["bo"])


def clip_global_norm(grads, max_norm):
    """Scale every gradient by max_norm/g when the global L2 norm g exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return dict(grads), total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total
