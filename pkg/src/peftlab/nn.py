"""Layers built on the autodiff tensor: linear, norm, attention, feed-forward."""

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Parameter, Tensor


class Module:
    """Parameter container with recursive, name-stable traversal.

    Children are discovered from instance attributes in insertion order, so
    parameter paths such as ``decoder.layers.0.cross_attn.wq.weight`` are
    stable across runs.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, value in self._children():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            else:
                yield from value.named_parameters(path + ".")

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def freeze(self):
        for p in self.parameters():
            p.freeze()
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.unfreeze()
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, value in state.items():
            if name not in params:
                continue
            if params[name].shape != tuple(np.shape(value)):
                raise ShapeError(f"{name}: expected {params[name].shape}, got {np.shape(value)}")
            params[name].data = np.array(value, dtype=np.float64)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored as (out_features, in_features)."""

    def __init__(self, in_features, out_features, rng, bias=True, init_scale=None):
        scale = init_scale if init_scale is not None else 1.0 / math.sqrt(in_features)
        self.weight = Parameter(rng.normal(0.0, scale, size=(out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects width {self.in_features}, got {x.shape}")
        y = T.matmul(x, self.weight.transpose())
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num, dim, rng, scale=0.02):
        self.weight = Parameter(rng.normal(0.0, scale, size=(num, dim)))

    def forward(self, ids):
        return T.embedding(self.weight, ids)


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def scaled_dot_attention(q, k, v, mask=None):
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two axes.

    ``mask`` is an additive array broadcastable to the score shape (0 to keep,
    a large negative value to drop). Returns the output and the weights.
    """
    dk = q.shape[-1]
    scores = T.matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(dk))
    if mask is not None:
        scores = scores + Tensor(mask)
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


NEG_INF = -1e9


def causal_mask(n):
    return np.triu(np.full((n, n), NEG_INF), k=1)


def padding_mask(keep):
    """Additive key mask of shape (B, 1, 1, S) from a boolean (B, S) keep array."""
    keep = np.asarray(keep, dtype=bool)
    return np.where(keep, 0.0, NEG_INF)[:, None, None, :]


class MultiHeadAttention(Module):
    """Multi-head attention with query/key/value/output projections.

    Queries come from ``x``; keys and values from ``memory`` (``x`` itself
    for self-attention). Inputs are (B, T, d) and (B, S, d).
    """

    projection_names = {"query": "wq", "key": "wk", "value": "wv", "output": "wo"}

    def __init__(self, dim, n_heads, rng):
        if dim % n_heads:
            raise ShapeError(f"d_model {dim} is not divisible by n_heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.last_weights = None

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.dim // self.n_heads).transpose(0, 2, 1, 3)

    def forward(self, x, memory=None, mask=None):
        memory = x if memory is None else memory
        if x.shape[-1] != self.dim or memory.shape[-1] != self.dim:
            raise ShapeError(
                f"attention width mismatch: queries {x.shape}, memory {memory.shape}, d_model {self.dim}"
            )
        b, n, _ = x.shape
        q = self._split(self.wq(x))
        k = self._split(self.wk(memory))
        v = self._split(self.wv(memory))
        out, weights = scaled_dot_attention(q, k, v, mask)
        self.last_weights = weights.data
        out = out.transpose(0, 2, 1, 3).reshape(b, n, self.dim)
        return self.wo(out)


def sinusoidal_embedding(positions, dim):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = positions * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=1)
    return emb
