"""Attention, transformer block, encodings and the condition-induced linear layer.

Layers own their parameters as leaf tensors and expose them through
``parameters()`` / ``named_parameters()``. Inputs are batched ``[..., s, d]``
tensors; a single sequence may be passed as ``[s, d]``.
"""

import math

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, LabelingError
from .labels import N_CATEGORIES, NULL_INDEX, ConditionLabel


def xavier_uniform(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Module:
    """Parameter bookkeeping. Children are discovered from attributes."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, T.Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ConfigurationError(
                f"parameter mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}"
            )
        for name, p in own.items():
            value = np.asarray(state[name], dtype=T.DTYPE)
            if value.shape != p.data.shape:
                raise ConfigurationError(f"{name}: stored shape {value.shape} != model shape {p.data.shape}")
            p.data = value.copy()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        self.weight = T.parameter(xavier_uniform(rng, in_dim, out_dim))
        self.bias = T.parameter(np.zeros(out_dim)) if bias else None
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width):
        self.gain = T.parameter(np.ones(width))
        self.bias = T.parameter(np.zeros(width))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


def attention_head(x, w_q, w_k, w_v):
    """Single self-attention head.

    Returns ``(output, scores)`` where ``scores = softmax(Q K^T / sqrt(d_k))``
    row-wise and ``output = scores @ V``.
    """
    w_q, w_k, w_v = T.as_tensor(w_q), T.as_tensor(w_k), T.as_tensor(w_v)
    d_k = w_q.shape[1]
    if d_k == 0 or w_k.shape[1] != d_k:
        raise ConfigurationError(f"attention head: query width {d_k} and key width {w_k.shape[1]} must agree and be > 0")
    q = T.matmul(x, w_q)
    k = T.matmul(x, w_k)
    v = T.matmul(x, w_v)
    scores = T.softmax(T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(d_k)), axis=-1)
    return T.matmul(scores, v), scores


class MultiHeadAttention(Module):
    """Heads share one (d_in, h*d_k) projection per Q/K/V; head i owns columns i*d_k:(i+1)*d_k."""

    def __init__(self, d_in, d_out, heads, rng, d_head=None):
        if heads < 1:
            raise ConfigurationError("need at least one attention head")
        if d_head is None:
            if d_in % heads:
                raise ConfigurationError(f"width {d_in} not divisible by {heads} heads")
            d_head = d_in // heads
        self.heads, self.d_head = heads, d_head
        inner = heads * d_head
        self.w_q = T.parameter(xavier_uniform(rng, d_in, inner))
        self.w_k = T.parameter(xavier_uniform(rng, d_in, inner))
        self.w_v = T.parameter(xavier_uniform(rng, d_in, inner))
        self.w_out = T.parameter(xavier_uniform(rng, inner, d_out))
        self.last_scores = None

    def head_weights(self, i):
        cols = slice(i * self.d_head, (i + 1) * self.d_head)
        return self.w_q[:, cols], self.w_k[:, cols], self.w_v[:, cols]

    def __call__(self, x):
        x = T.as_tensor(x)
        inner = self.heads * self.d_head
        if self.w_out.shape[0] != inner:
            raise ConfigurationError(f"w_out expects {self.w_out.shape[0]} inputs, heads give {inner}")
        *lead, s, _ = x.shape
        h, dk = self.heads, self.d_head

        def split(t):
            # [..., s, h*dk] -> [..., h, s, dk]
            t = T.reshape(t, (*lead, s, h, dk))
            axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
            return T.transpose(t, axes)

        q = split(T.matmul(x, self.w_q))
        k = split(T.matmul(x, self.w_k))
        v = split(T.matmul(x, self.w_v))
        scores = T.softmax(T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dk)), axis=-1)
        self.last_scores = scores.data
        heads = T.matmul(scores, v)
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        merged = T.reshape(T.transpose(heads, axes), (*lead, s, inner))
        return T.matmul(merged, self.w_out)


class FeedForward(Module):
    def __init__(self, width, ff_dim, rng):
        self.inner = Linear(width, ff_dim, rng)
        self.outer = Linear(ff_dim, width, rng)

    def __call__(self, x):
        return self.outer(T.gelu(self.inner(x)))


class TransformerBlock(Module):
    """Post-norm block: ``x' = LN(x + MSA(x))``, ``y = LN(x' + FF(x'))``."""

    def __init__(self, width, heads, ff_dim, rng):
        self.width = width
        self.attention = MultiHeadAttention(width, width, heads, rng)
        self.norm1 = LayerNorm(width)
        self.ff = FeedForward(width, ff_dim, rng)
        self.norm2 = LayerNorm(width)

    def __call__(self, x):
        x = T.as_tensor(x)
        if x.shape[-1] != self.width:
            raise ConfigurationError(f"transformer block width {self.width}, input width {x.shape[-1]}")
        x = self.norm1(x + self.attention(x))
        return self.norm2(x + self.ff(x))


def sinusoidal_encode(k, dim=64):
    """Fixed sin/cos encoding; entry 2i is sin(k / 10000^(2i/dim)), 2i+1 the cosine."""
    if dim % 2:
        raise ConfigurationError(f"sinusoidal encoding needs an even width, got {dim}")
    k = np.asarray(k, dtype=T.DTYPE)
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=T.DTYPE) / dim)
    angles = k[..., None] * freqs
    out = np.empty(k.shape + (dim,), dtype=T.DTYPE)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def positional_table(length, dim):
    return sinusoidal_encode(np.arange(length), dim)


class CategoryTable(Module):
    """Learnable embedding rows for the 12 categories plus a null row."""

    def __init__(self, width, rng, std=0.02):
        self.table = T.parameter(rng.normal((N_CATEGORIES + 1, width)) * std)
        self.width = width

    def lookup(self, indices):
        return T.take_rows(self.table, indices)


def label_index(label):
    if label is None:
        return NULL_INDEX
    if isinstance(label, ConditionLabel):
        return label.index
    if isinstance(label, (int, np.integer)):
        if not 0 <= int(label) <= NULL_INDEX:
            raise LabelingError(f"category index {label} outside 0..{NULL_INDEX}")
        return int(label)
    raise LabelingError(f"cannot interpret {label!r} as a category")


def build_condition_embedding(table, labels, steps, time_dim=64, zero_time=False):
    """Concatenate category rows with the sinusoidal encoding of the diffusion step.

    ``labels`` and ``steps`` are equal-length sequences (``None`` = null token).
    Returns a ``[B, table.width + time_dim]`` tensor.
    """
    idx = np.array([label_index(lab) for lab in labels], dtype=np.intp)
    cat = table.lookup(idx)
    if zero_time:
        timing = np.zeros((len(idx), time_dim))
    else:
        timing = sinusoidal_encode(np.asarray(steps, dtype=T.DTYPE), time_dim)
    return T.concat([cat, T.Tensor(timing)], axis=-1)


class ConditionLinear(Module):
    """``f(x, c) = (x W1 + b1) * sigmoid(x W2 + b2) + (c W3 + b3)``.

    ``x`` is ``[B, s, in]`` (or ``[s, in]``); ``c`` is ``[B, cond]`` (or
    ``[cond]``) and is shared by every position of its sequence.
    """

    def __init__(self, in_dim, out_dim, cond_dim, rng):
        self.w1 = T.parameter(xavier_uniform(rng, in_dim, out_dim))
        self.b1 = T.parameter(np.zeros(out_dim))
        self.w2 = T.parameter(xavier_uniform(rng, in_dim, out_dim))
        self.b2 = T.parameter(np.zeros(out_dim))
        self.w3 = T.parameter(xavier_uniform(rng, cond_dim, out_dim))
        self.b3 = T.parameter(np.zeros(out_dim))
        self.in_dim, self.out_dim, self.cond_dim = in_dim, out_dim, cond_dim

    def __call__(self, x, c):
        x, c = T.as_tensor(x), T.as_tensor(c)
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(f"condition linear expects input width {self.in_dim}, got {x.shape[-1]}")
        if c.shape[-1] != self.cond_dim:
            raise ConfigurationError(f"condition linear expects condition width {self.cond_dim}, got {c.shape[-1]}")
        main = T.linear(x, self.w1, self.b1)
        gate = T.sigmoid(T.linear(x, self.w2, self.b2))
        cond = T.linear(c, self.w3, self.b3)
        if x.ndim == c.ndim + 1:
            cond = T.reshape(cond, cond.shape[:-1] + (1, self.out_dim))
        return main * gate + cond
