"""Candidate layer catalog, multi-input combiners, and relative-position
self-attention with temporal/spatial modes and convolution-mimicking init.

Data layout conventions:
  * 2-D stage tensors are (batch, time, width) and every layer maps
    (batch, time, width) -> (batch, time', width').
  * 1-D stage tensors are (batch, width); convolution channels are flattened
    back into the width so the stage stays rank 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .tensor import Tensor


class StructuralError(ValueError):
    """Raised when a layer is applied to data it cannot accept."""


class ConfigError(ValueError):
    """Raised for invalid layer hyperparameters."""


ACTIVATIONS = ("identity", "relu", "leaky_relu", "sigmoid", "tanh")
COMBINERS = ("add", "mul", "concat")
LAYER_KINDS_2D = (
    "Identity",
    "MLP",
    "SelfAttention",
    "Conv2D",
    "Pool2D",
    "Norm2D",
    "Dropout",
)
LAYER_KINDS_1D = (
    "Identity",
    "MLP",
    "SelfAttention",
    "Conv1D",
    "Pool1D",
    "Norm1D",
    "Dropout",
)

# Per-kind hyperparameter schema: name -> validator description
LAYER_PARAM_KEYS = {
    "Identity": (),
    "MLP": ("out",),
    "SelfAttention": ("dimension", "init", "heads", "out"),
    "Conv1D": ("kernel", "out"),
    "Conv2D": ("kernel", "out"),
    "Pool1D": ("size", "type"),
    "Pool2D": ("size", "type"),
    "Norm1D": ("type",),
    "Norm2D": ("type",),
    "Dropout": ("rate",),
}

BN_MOMENTUM = 0.1
CONV_INIT_CONCENTRATION = 100.0


@dataclass(frozen=True)
class LayerSpec:
    """One node's layer choice plus its hyperparameters."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_PARAM_KEYS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        keys = set(self.params)
        expected = set(LAYER_PARAM_KEYS[self.kind])
        if self.kind == "SelfAttention":
            # dimension is present only inside the 2-D stage
            expected_no_dim = expected - {"dimension"}
            if keys not in (expected, expected_no_dim):
                raise ConfigError(
                    f"SelfAttention params {sorted(keys)} do not match schema"
                )
        elif keys != expected:
            raise ConfigError(
                f"{self.kind} params {sorted(keys)} != expected {sorted(expected)}"
            )
        for name in ("out", "heads", "kernel", "size"):
            if name in self.params and int(self.params[name]) < 1:
                raise ConfigError(f"{self.kind}.{name} must be >= 1")
        if self.kind == "Dropout" and not 0.0 <= float(self.params["rate"]) < 1.0:
            raise ConfigError("dropout rate must be in [0, 1)")
        if self.params.get("type") not in (None, "max", "average", "batch", "layer"):
            raise ConfigError(f"bad type {self.params.get('type')!r}")
        if self.params.get("dimension") not in (None, "temporal", "spatial"):
            raise ConfigError(f"bad dimension {self.params.get('dimension')!r}")
        if self.params.get("init") not in (None, "convolution", "random"):
            raise ConfigError(f"bad init {self.params.get('init')!r}")


@dataclass
class AttentionParams:
    """Weights of one relative-position self-attention layer.

    Per head h, scores between query q and key k are
      A[q,k] = (Wq x_q)·(Wk x_k) + (Wq x_q)·(Wk_hat r_{k-q})
             + u·(Wk x_k) + v·(Wk_hat r_{k-q})
    with r the learned relative-position encodings.  Head outputs are merged
    by concatenation and projected by (w_o, b_o).
    """

    w_q: Tensor  # (heads, seq, d)
    w_k: Tensor  # (heads, seq, d)
    w_k_hat: Tensor  # (heads, seq, 2*seq-1)
    delta_r: Tensor  # (2*seq-1, 2*seq-1) relative-position encodings
    u: Tensor  # (heads, seq)
    v: Tensor  # (heads, seq)
    w_o: Tensor  # (heads*d, out)
    b_o: Tensor  # (out,)
    n_heads: int

    @property
    def seq_len(self):
        return self.w_q.shape[1]

    def tensors(self):
        return [
            self.w_q,
            self.w_k,
            self.w_k_hat,
            self.delta_r,
            self.u,
            self.v,
            self.w_o,
            self.b_o,
        ]


# widths in the 1-D stage grow multiplicatively when conv/attention outputs
# are flattened back into the vector, so wide inputs are condensed by average
# pooling first; keeps memory bounded for arbitrary stacked genotypes
MAX_VECTOR_WIDTH = 1024
MAX_ATTENTION_SEQ = 64


def condense_width(w, cap):
    """Pooling window and resulting width that bring a vector under cap."""
    if w <= cap:
        return 1, w
    s = -(-w // cap)
    return s, w // s


def _glorot(rng, shape):
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def apply_activation(name, x):
    if name not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {name!r}")
    if name == "leaky_relu":
        return T.leaky_relu(x, 0.01)
    return T.ELEMENTWISE[name](x)


# ---------------------------------------------------------------------------
# combiner

def combine(inputs, kind):
    """Merge node inputs: add/mul zero-pad trailing axes to the max extents,
    concat pads all but the last axis and joins along the last one."""
    if kind not in COMBINERS:
        raise ConfigError(f"unknown combiner {kind!r}")
    if not inputs:
        raise StructuralError("combiner needs at least one input")
    ranks = {x.data.ndim for x in inputs}
    if len(ranks) != 1:
        raise StructuralError(f"combiner rank mismatch: {sorted(ranks)}")
    if len(inputs) == 1 and kind != "concat":
        return inputs[0]
    rank = ranks.pop()
    maxima = [max(x.shape[axis] for x in inputs) for axis in range(rank)]

    def padded(x, skip_last):
        pw = []
        for axis in range(rank):
            target = x.shape[axis] if (skip_last and axis == rank - 1) else maxima[axis]
            pw.append((0, target - x.shape[axis]))
        if all(b == 0 and a == 0 for b, a in pw):
            return x
        return T.pad(x, pw)

    if kind == "concat":
        return T.concat([padded(x, skip_last=True) for x in inputs], axis=rank - 1)
    acc = padded(inputs[0], skip_last=False)
    for x in inputs[1:]:
        nxt = padded(x, skip_last=False)
        acc = T.add(acc, nxt) if kind == "add" else T.mul(acc, nxt)
    return acc


# ---------------------------------------------------------------------------
# attention

def init_attention_params(seq_len, d, n_heads, out_dim, rng):
    """Random (glorot content / small relative) attention weights."""
    nr = 2 * seq_len - 1
    return AttentionParams(
        w_q=T.parameter(_glorot(rng, (n_heads, seq_len, d))),
        w_k=T.parameter(_glorot(rng, (n_heads, seq_len, d))),
        w_k_hat=T.parameter(0.1 * rng.standard_normal((n_heads, seq_len, nr))),
        delta_r=T.parameter(np.eye(nr)),
        u=T.parameter(0.1 * rng.standard_normal((n_heads, seq_len))),
        v=T.parameter(0.1 * rng.standard_normal((n_heads, seq_len))),
        w_o=T.parameter(_glorot(rng, (n_heads * d, out_dim))),
        b_o=T.parameter(np.zeros(out_dim)),
        n_heads=n_heads,
    )


def attention_conv_init(p, kernel_size, concentration=CONV_INIT_CONCENTRATION):
    """Rewire attention weights so each head attends to one kernel offset.

    Head h gets relative offset h - kernel_size//2 (cycling when there are
    more heads than offsets); content score terms are zeroed so the softmax
    is driven by the position term alone.
    """
    if p.n_heads < kernel_size:
        raise ConfigError(
            f"convolution init needs heads >= kernel size ({p.n_heads} < {kernel_size})"
        )
    seq = p.seq_len
    nr = 2 * seq - 1
    kernel_size = min(kernel_size, nr)
    p.w_q.data[...] = 0.0
    p.w_k.data[...] = 0.0
    p.u.data[...] = 0.0
    p.delta_r.data[...] = np.eye(nr)
    p.w_k_hat.data[...] = 0.0
    p.v.data[...] = 0.0
    offsets = head_offsets(p.n_heads, kernel_size)
    for h, off in enumerate(offsets):
        idx = off + seq - 1
        p.w_k_hat.data[h, 0, idx] = 1.0
        p.v.data[h, 0] = concentration
    return p


def head_offsets(n_heads, kernel_size):
    """Designated relative offset per head for convolution-style init."""
    half = kernel_size // 2
    return [(h % kernel_size) - half for h in range(n_heads)]


def attention_forward(p, x):
    """Apply relative-position self-attention to x of shape (batch, seq, d)."""
    if x.data.ndim != 3:
        raise StructuralError(f"attention expects rank 3, got {x.shape}")
    b, seq, d = x.shape
    if seq != p.seq_len:
        raise StructuralError(
            f"attention built for sequence {p.seq_len}, got {seq}"
        )
    nh = p.n_heads
    x4 = T.reshape(x, (b, 1, seq, d))
    # content projections: (b, nh, seq, seq_k-dim)
    q = T.matmul(x4, T.transpose(p.w_q, (0, 2, 1)))
    k = T.matmul(x4, T.transpose(p.w_k, (0, 2, 1)))
    # relative-position keys: (nh, 2s-1, seq-dim)
    rel_keys = T.matmul(p.delta_r, T.transpose(p.w_k_hat, (0, 2, 1)))
    term1 = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    term2 = T.rel_shift(T.matmul(q, T.transpose(rel_keys, (0, 2, 1))), seq)
    term3 = T.transpose(
        T.reshape(T.matmul(k, T.reshape(p.u, (nh, seq, 1))), (b, nh, 1, seq)),
        (0, 1, 2, 3),
    )
    t4 = T.reshape(
        T.matmul(rel_keys, T.reshape(p.v, (nh, seq, 1))), (nh, 2 * seq - 1)
    )
    term4 = T.rel_expand(t4, seq, seq)  # (nh, seq, seq)
    scores = T.add(T.add(term1, term2), T.add(term3, term4))
    if not np.all(np.isfinite(scores.data)):
        raise FloatingPointError("non-finite attention scores")
    attn = T.softmax(scores, axis=-1)
    heads = T.matmul(attn, x4)  # (b, nh, seq, d)
    merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, seq, nh * d))
    return T.add(T.matmul(merged, p.w_o), p.b_o)


# ---------------------------------------------------------------------------
# per-kind parameter init

def init_layer_params(spec, in_shape, rng, two_d):
    """Create the parameter record for one layer given its input shape
    (without the batch axis)."""
    kind = spec.kind
    p = spec.params
    if two_d and kind not in LAYER_KINDS_2D:
        raise StructuralError(f"{kind} is not a 2-D stage layer")
    if not two_d and kind not in LAYER_KINDS_1D:
        raise StructuralError(f"{kind} is not a 1-D stage layer")
    if not two_d and "dimension" in p:
        raise StructuralError("attention dimension is only legal in the 2-D stage")

    if kind == "Identity":
        return {}
    if kind == "MLP":
        fan_in = in_shape[-1]
        return {
            "w": T.parameter(_glorot(rng, (fan_in, int(p["out"])))),
            "b": T.parameter(np.zeros(int(p["out"]))),
        }
    if kind == "SelfAttention":
        if two_d:
            time, width = in_shape
            if p.get("dimension") == "spatial":
                seq, d = condense_width(width, MAX_ATTENTION_SEQ)[1], time
            else:
                seq, d = time, width
        else:
            cap = min(MAX_ATTENTION_SEQ, max(1, MAX_VECTOR_WIDTH // int(p["out"])))
            seq, d = condense_width(in_shape[0], cap)[1], 1
        ap = init_attention_params(seq, d, int(p["heads"]), int(p["out"]), rng)
        if p["init"] == "convolution":
            attention_conv_init(ap, kernel_size=int(p["heads"]))
        return {"attn": ap}
    if kind == "Conv1D":
        w2 = condense_width(in_shape[0], max(1, MAX_VECTOR_WIDTH // int(p["out"])))[1]
        k = min(int(p["kernel"]), w2)
        return {
            "w": T.parameter(_glorot(rng, (int(p["out"]), 1, k)).reshape(int(p["out"]), 1, k)),
            "b": T.parameter(np.zeros(int(p["out"]))),
        }
    if kind == "Conv2D":
        time, width = in_shape
        k = min(int(p["kernel"]), time)
        w = _glorot(rng, (width * k, int(p["out"]))).T.reshape(int(p["out"]), width, k)
        return {"w": T.parameter(w), "b": T.parameter(np.zeros(int(p["out"])))}
    if kind in ("Pool1D", "Pool2D"):
        return {}
    if kind in ("Norm1D", "Norm2D"):
        width = in_shape[-1]
        return {
            "gamma": T.parameter(np.ones(width)),
            "beta": T.parameter(np.zeros(width)),
            "running_mean": np.zeros(width),
            "running_var": np.ones(width),
        }
    if kind == "Dropout":
        return {"rng": np.random.default_rng(rng.integers(2**63))}
    raise ConfigError(f"unknown layer kind {kind!r}")


def layer_output_shape(spec, in_shape, two_d):
    """Shape (without batch) produced by the layer; mirrors layer_forward."""
    kind = spec.kind
    p = spec.params
    if kind == "Identity" or kind in ("Norm1D", "Norm2D") or kind == "Dropout":
        return tuple(in_shape)
    if kind == "MLP":
        return tuple(in_shape[:-1]) + (int(p["out"]),)
    if kind == "SelfAttention":
        if two_d:
            time, width = in_shape
            if p.get("dimension") == "spatial":
                return (int(p["out"]), condense_width(width, MAX_ATTENTION_SEQ)[1])
            return (time, int(p["out"]))
        cap = min(MAX_ATTENTION_SEQ, max(1, MAX_VECTOR_WIDTH // int(p["out"])))
        return (condense_width(in_shape[0], cap)[1] * int(p["out"]),)
    if kind == "Conv1D":
        w2 = condense_width(in_shape[0], max(1, MAX_VECTOR_WIDTH // int(p["out"])))[1]
        return (w2 * int(p["out"]),)
    if kind == "Conv2D":
        return (in_shape[0], int(p["out"]))
    if kind == "Pool1D":
        s = min(int(p["size"]), in_shape[0])
        return (max(in_shape[0] // s, 1),)
    if kind == "Pool2D":
        time, width = in_shape
        s = int(p["size"])
        return (max(time // min(s, time), 1), max(width // min(s, width), 1))
    raise ConfigError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# forward

def _batchnorm(x, params, reduce_axes, train):
    gamma, beta = params["gamma"], params["beta"]
    if train:
        mean = np.mean(x.data, axis=reduce_axes)
        var = np.var(x.data, axis=reduce_axes)
        params["running_mean"] *= 1.0 - BN_MOMENTUM
        params["running_mean"] += BN_MOMENTUM * mean
        params["running_var"] *= 1.0 - BN_MOMENTUM
        params["running_var"] += BN_MOMENTUM * var
        mu = T.tmean(x, axis=reduce_axes[0], keepdims=True)
        for axis in reduce_axes[1:]:
            mu = T.tmean(mu, axis=axis, keepdims=True)
        centered = T.sub(x, mu)
        sq = T.mul(centered, centered)
        var_t = T.tmean(sq, axis=reduce_axes[0], keepdims=True)
        for axis in reduce_axes[1:]:
            var_t = T.tmean(var_t, axis=axis, keepdims=True)
        inv = T.powc(T.add(var_t, Tensor(np.full(var_t.shape, 1e-8))), -0.5)
        normed = T.mul(centered, inv)
    else:
        mean = params["running_mean"]
        std = np.sqrt(params["running_var"] + 1e-8)
        normed = T.mul(T.sub(x, Tensor(mean)), Tensor(1.0 / std))
    return T.add(T.mul(normed, gamma), beta)


def _layernorm(x, params):
    mu = T.tmean(x, axis=-1, keepdims=True)
    centered = T.sub(x, mu)
    var = T.tmean(T.mul(centered, centered), axis=-1, keepdims=True)
    inv = T.powc(T.add(var, Tensor(np.full(var.shape, 1e-8))), -0.5)
    return T.add(T.mul(T.mul(centered, inv), params["gamma"]), params["beta"])


def _condense(x, w, cap):
    s, w2 = condense_width(w, cap)
    if s == 1:
        return x, w
    b = x.shape[0]
    pooled = T.pooling(T.reshape(x, (b, 1, w)), s, "average", spatial_rank=1)
    return T.reshape(pooled, (b, w2)), w2


def layer_forward(spec, params, x, mode="train"):
    """Apply one catalog layer.  2-D kinds expect rank-3 input, 1-D kinds
    rank-2; dropout and batch-norm respect ``mode``."""
    kind = spec.kind
    p = spec.params
    train = mode == "train"
    two_d = kind in ("Conv2D", "Pool2D", "Norm2D") or (
        kind == "SelfAttention" and "dimension" in p
    )
    expected_rank = 3 if two_d else None
    if kind in ("Conv1D", "Pool1D", "Norm1D"):
        expected_rank = 2
    if expected_rank is not None and x.data.ndim != expected_rank:
        raise StructuralError(
            f"{kind} expects rank {expected_rank}, got shape {x.shape}"
        )

    if kind == "Identity":
        return x
    if kind == "MLP":
        return T.add(T.matmul(x, params["w"]), params["b"])
    if kind == "SelfAttention":
        if x.data.ndim == 3:
            if p.get("dimension") == "spatial":
                b, time, width = x.shape
                s, w2 = condense_width(width, MAX_ATTENTION_SEQ)
                if s > 1:
                    x = T.pooling(x, s, "average", spatial_rank=1)
                out = attention_forward(params["attn"], T.transpose(x, (0, 2, 1)))
                return T.transpose(out, (0, 2, 1))
            return attention_forward(params["attn"], x)
        b, w = x.shape
        cap = min(MAX_ATTENTION_SEQ, max(1, MAX_VECTOR_WIDTH // int(p["out"])))
        x, w = _condense(x, w, cap)
        out = attention_forward(params["attn"], T.reshape(x, (b, w, 1)))
        return T.reshape(out, (b, w * int(p["out"])))
    if kind == "Conv1D":
        b, w = x.shape
        x, w = _condense(x, w, max(1, MAX_VECTOR_WIDTH // int(p["out"])))
        y = T.convolution(
            T.reshape(x, (b, 1, w)), params["w"], spatial_rank=1, padding="same"
        )
        y = T.add(y, T.reshape(params["b"], (int(p["out"]), 1)))
        return T.reshape(T.transpose(y, (0, 2, 1)), (b, w * int(p["out"])))
    if kind == "Conv2D":
        b, time, width = x.shape
        y = T.convolution(
            T.transpose(x, (0, 2, 1)), params["w"], spatial_rank=1, padding="same"
        )
        y = T.add(y, T.reshape(params["b"], (int(p["out"]), 1)))
        return T.transpose(y, (0, 2, 1))
    if kind == "Pool1D":
        b, w = x.shape
        s = min(int(p["size"]), w)
        y = T.pooling(T.reshape(x, (b, 1, w)), s, p["type"], spatial_rank=1)
        return T.reshape(y, (b, w // s))
    if kind == "Pool2D":
        b, time, width = x.shape
        st = min(int(p["size"]), time)
        sw = min(int(p["size"]), width)
        y = T.pooling(
            T.reshape(x, (b, 1, time, width)), (st, sw), p["type"], spatial_rank=2
        )
        return T.reshape(y, (b, time // st, width // sw))
    if kind == "Norm1D":
        if p["type"] == "batch":
            return _batchnorm(x, params, (0,), train)
        return _layernorm(x, params)
    if kind == "Norm2D":
        if p["type"] == "batch":
            return _batchnorm(x, params, (0, 1), train)
        return _layernorm(x, params)
    if kind == "Dropout":
        return T.dropout(x, float(p["rate"]), params["rng"], train)
    raise ConfigError(f"unknown layer kind {kind!r}")


def layer_param_tensors(params):
    """All trainable tensors inside one layer's parameter record."""
    out = []
    for value in params.values():
        if isinstance(value, Tensor):
            out.append(value)
        elif isinstance(value, AttentionParams):
            out.extend(value.tensors())
    return out
