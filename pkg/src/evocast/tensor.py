"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records every primitive applied while it is active; ``Tape.backward``
replays the records in reverse to populate ``grad`` buffers.  One tape per
training session, never shared between workers.  All math is float64 and fully
deterministic: no algorithmic shortcuts that change results.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


_ACTIVE_TAPE = None


class Tensor:
    """Row-major float64 n-d array, optionally carrying a gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 0 < arr.ndim <= 4:
            raise ShapeError(f"rank must be in 1..4, got {arr.ndim}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data):
    return Tensor(data, requires_grad=True)


class Tape:
    """Append-only record of primitive applications; topological by append order."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a Tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out, backward_fn):
        self._nodes.append((out, backward_fn))

    def backward(self, loss):
        """Populate grads of every ancestor of ``loss``; consumes the tape."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)
        self._nodes.clear()


def active_tape():
    return _ACTIVE_TAPE


def _record(out, inputs, backward_fn):
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _record(out, (a, b), backward)


def sub(a, b):
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _record(out, (a, b), backward)


def mul(a, b):
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _record(out, (a, b), backward)


def scale(x, c):
    c = float(c)
    out = Tensor(x.data * c)

    def backward(g):
        _accumulate(x, g * c)

    return _record(out, (x,), backward)


def powc(x, p):
    """Elementwise x**p for a constant exponent (x must stay positive if p < 1)."""
    p = float(p)
    out = Tensor(np.power(x.data, p))

    def backward(g):
        _accumulate(x, g * p * np.power(x.data, p - 1.0))

    return _record(out, (x,), backward)


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _record(out, (x,), backward)


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _record(out, (x,), backward)


def concat(tensors, axis):
    ranks = {t.data.ndim for t in tensors}
    if len(ranks) != 1:
        raise ShapeError(f"concat: mixed ranks {sorted(ranks)}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _record(out, tuple(tensors), backward)


def pad(x, pad_width):
    """Zero-pad; ``pad_width`` is a per-axis (before, after) sequence."""
    pad_width = tuple((int(b), int(a)) for b, a in pad_width)
    out = Tensor(np.pad(x.data, pad_width))
    slices = tuple(
        slice(b, b + e) for (b, _), e in zip(pad_width, x.data.shape)
    )

    def backward(g):
        _accumulate(x, g[slices])

    return _record(out, (x,), backward)


def tsum(x, axis=None, keepdims=False):
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _record(out, (x,), backward)


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape) / n)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# nonlinearities

def softmax(x, axis):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} out of bounds for rank {x.data.ndim}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _accumulate(x, y * (g - dot))

    return _record(out, (x,), backward)


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0))

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _record(out, (x,), backward)


def leaky_relu(x, slope=0.01):
    out = Tensor(np.where(x.data > 0, x.data, slope * x.data))

    def backward(g):
        _accumulate(x, g * np.where(x.data > 0, 1.0, slope))

    return _record(out, (x,), backward)


def sigmoid(x):
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def backward(g):
        _accumulate(x, g * y * (1.0 - y))

    return _record(out, (x,), backward)


def tanh(x):
    y = np.tanh(x.data)
    out = Tensor(y)

    def backward(g):
        _accumulate(x, g * (1.0 - y * y))

    return _record(out, (x,), backward)


def identity(x):
    return x


ELEMENTWISE = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "identity": identity,
}


# ---------------------------------------------------------------------------
# convolution and pooling

def _conv_out_extent(n, k, same):
    return n if same else n - k + 1


def convolution(x, kernel, spatial_rank, padding="valid"):
    """Cross-correlation, stride 1.

    ``x`` is (batch, in_channels, *spatial), ``kernel`` is
    (out_channels, in_channels, *kspatial).  ``padding`` is "valid" or "same".
    """
    if spatial_rank not in (1, 2):
        raise ShapeError(f"spatial_rank must be 1 or 2, got {spatial_rank}")
    if x.data.ndim != 2 + spatial_rank or kernel.data.ndim != 2 + spatial_rank:
        raise ShapeError(
            f"convolution rank-{spatial_rank}: got input {x.shape}, kernel {kernel.shape}"
        )
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"convolution: channel mismatch, input {x.shape}, kernel {kernel.shape}"
        )
    same = padding == "same"
    kext = kernel.shape[2:]
    if same:
        pw = [(0, 0), (0, 0)] + [((k - 1) // 2, k // 2) for k in kext]
        xp = np.pad(x.data, pw)
    else:
        pw = None
        xp = x.data
    for n, k in zip(xp.shape[2:], kext):
        if k > n:
            raise ShapeError(
                f"convolution: kernel {kernel.shape} larger than padded input {xp.shape}"
            )
    b = x.shape[0]
    co = kernel.shape[0]
    w = kernel.data

    if spatial_rank == 1:
        lout = xp.shape[2] - kext[0] + 1
        y = np.zeros((b, co, lout))
        for k in range(kext[0]):
            y += np.einsum("bcl,oc->bol", xp[:, :, k : k + lout], w[:, :, k])
    else:
        hout = xp.shape[2] - kext[0] + 1
        wout = xp.shape[3] - kext[1] + 1
        y = np.zeros((b, co, hout, wout))
        for kh in range(kext[0]):
            for kw in range(kext[1]):
                y += np.einsum(
                    "bchw,oc->bohw",
                    xp[:, :, kh : kh + hout, kw : kw + wout],
                    w[:, :, kh, kw],
                )
    out = Tensor(y)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        if spatial_rank == 1:
            for k in range(kext[0]):
                gxp[:, :, k : k + lout] += np.einsum("bol,oc->bcl", g, w[:, :, k])
                gw[:, :, k] += np.einsum("bol,bcl->oc", g, xp[:, :, k : k + lout])
        else:
            for kh in range(kext[0]):
                for kw in range(kext[1]):
                    patch = gxp[:, :, kh : kh + hout, kw : kw + wout]
                    patch += np.einsum("bohw,oc->bchw", g, w[:, :, kh, kw])
                    gw[:, :, kh, kw] += np.einsum(
                        "bohw,bchw->oc", g, xp[:, :, kh : kh + hout, kw : kw + wout]
                    )
        if same:
            slices = tuple(
                slice(bef, bef + e) for (bef, _), e in zip(pw, x.data.shape)
            )
            gxp = gxp[slices]
        _accumulate(x, gxp)
        _accumulate(kernel, gw)

    return _record(out, (x, kernel), backward)


def pooling(x, window, kind, spatial_rank):
    """Non-overlapping pooling, stride equal to window; trailing remainder cropped.

    ``x`` is (batch, channels, *spatial); ``window`` is an int or per-axis tuple.
    """
    if spatial_rank not in (1, 2):
        raise ShapeError(f"spatial_rank must be 1 or 2, got {spatial_rank}")
    if kind not in ("max", "average"):
        raise ContractError(f"pooling kind must be max|average, got {kind!r}")
    if x.data.ndim != 2 + spatial_rank:
        raise ShapeError(f"pooling rank-{spatial_rank}: got input {x.shape}")
    if isinstance(window, int):
        window = (window,) * spatial_rank
    window = tuple(int(w) for w in window)
    spatial = x.shape[2:]
    for n, w in zip(spatial, window):
        if w > n:
            raise ShapeError(f"pooling: window {window} exceeds input {x.shape}")
        if w < 1:
            raise ShapeError(f"pooling: window {window} must be >= 1")
    b, c = x.shape[:2]

    if spatial_rank == 1:
        (w0,) = window
        lout = spatial[0] // w0
        blocks = x.data[:, :, : lout * w0].reshape(b, c, lout, w0)
        reduce_axes = (3,)
    else:
        w0, w1 = window
        hout, wout = spatial[0] // w0, spatial[1] // w1
        blocks = x.data[:, :, : hout * w0, : wout * w1].reshape(
            b, c, hout, w0, wout, w1
        )
        reduce_axes = (3, 5)

    if kind == "max":
        y = blocks.max(axis=reduce_axes)
        mask = blocks == np.expand_dims(y, reduce_axes)
        # ties: split gradient among maxima of the window
        counts = mask.sum(axis=reduce_axes, keepdims=True)
    else:
        y = blocks.mean(axis=reduce_axes)
        mask = counts = None
    out = Tensor(y)

    def backward(g):
        gx = np.zeros_like(x.data)
        if spatial_rank == 1:
            gb = np.repeat(np.expand_dims(g, 3), w0, axis=3)
            if kind == "max":
                gb = gb * mask / counts
            else:
                gb = gb / w0
            gx[:, :, : lout * w0] = gb.reshape(b, c, lout * w0)
        else:
            gb = np.expand_dims(np.expand_dims(g, 3), 5)
            gb = np.broadcast_to(gb, (b, c, hout, w0, wout, w1))
            if kind == "max":
                gb = gb * mask / counts
            else:
                gb = gb / (w0 * w1)
            gx[:, :, : hout * w0, : wout * w1] = gb.reshape(
                b, c, hout * w0, wout * w1
            )
        _accumulate(x, gx)

    return _record(out, (x,), backward)


def dropout(x, rate, rng, train):
    """Inverted dropout: eval mode is a pass-through."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask)

    def backward(g):
        _accumulate(x, g * mask)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# relative-position index helpers (used by the attention layer)

def _rel_index(n_query, n_key):
    q = np.arange(n_query)[:, None]
    k = np.arange(n_key)[None, :]
    return k - q + n_query - 1


def rel_shift(x, n_key):
    """(…, Q, 2Q-1) offset-indexed scores -> (…, Q, K) absolute scores."""
    n_query = x.shape[-2]
    if x.shape[-1] != 2 * n_query - 1:
        raise ShapeError(f"rel_shift: last extent must be 2Q-1, got {x.shape}")
    idx = _rel_index(n_query, n_key)
    y = np.take_along_axis(
        x.data, np.broadcast_to(idx, x.shape[:-2] + idx.shape), axis=-1
    )
    out = Tensor(y)

    def backward(g):
        gx = np.zeros_like(x.data)
        flat_g = g.reshape(-1, n_query, n_key)
        flat_gx = gx.reshape(-1, n_query, 2 * n_query - 1)
        for q in range(n_query):
            np.add.at(flat_gx[:, q, :], (slice(None), idx[q]), flat_g[:, q, :])
        _accumulate(x, gx)

    return _record(out, (x,), backward)


def rel_expand(x, n_query, n_key):
    """(…, 2Q-1) per-offset values -> (…, Q, K) matrix via r[k - q]."""
    if x.shape[-1] != 2 * n_query - 1:
        raise ShapeError(f"rel_expand: last extent must be 2Q-1, got {x.shape}")
    idx = _rel_index(n_query, n_key)
    y = x.data[..., idx]
    out = Tensor(y)

    def backward(g):
        gx = np.zeros_like(x.data)
        flat_g = g.reshape(-1, n_query, n_key)
        flat_gx = gx.reshape(-1, 2 * n_query - 1)
        for q in range(n_query):
            np.add.at(flat_gx, (slice(None), idx[q]), flat_g[:, q, :])
        _accumulate(x, gx)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# optimizer

class AdamState:
    """First/second moment buffers and step counter for one parameter set."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state, lr):
    """One Adam update with bias correction.

    Returns False (and leaves parameters and ``t`` untouched) when any gradient
    is non-finite, so the caller can abort the candidate.
    """
    grads = []
    for p in state.params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            return False
        grads.append(g)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def zero_grads(params):
    for p in params:
        p.grad = None
