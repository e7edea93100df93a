"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the recorded trace in reverse
topological order, accumulates into ``.grad`` of every tensor that requires
it, then drops the closures so the trace can be garbage collected.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable trace recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


def _as_array(data):
    if isinstance(data, Tensor):
        return data.data
    return np.asarray(data, dtype=np.float64)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array with an optional gradient.

    ``data`` is always a C-contiguous float64 ndarray, so ``shape`` and
    ``data.size`` agree by construction. ``grad`` is allocated on first
    accumulation with the same shape as ``data``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    # -- bookkeeping -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self, grad=None):
        if self.data.size != 1 and grad is None:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        seed = np.ones_like(self.data) if grad is None else _as_array(grad)

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()

    # -- construction helper ----------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def back(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data

        def back(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data

        def back(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), back)

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ContractError("only constant exponents are supported")
        a = self.data
        p = float(exponent)
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), back)

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if not axes:
            if self.ndim != 2:
                raise ShapeError(f"transpose() without axes needs a 2-D tensor, got {self.shape}")
            axes = (1, 0)
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    @property
    def T(self):
        return self.transpose()

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        src = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise -------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        a = self.data
        return Tensor._make(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0),))

    def gelu(self):
        return gelu(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)


class Parameter(Tensor):
    """A named, trainable leaf tensor that can be frozen.

    A frozen parameter never records gradients and is skipped by optimizers.
    """

    def __init__(self, data, name="", frozen=False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen

    @property
    def trainable(self):
        return not self.frozen

    def freeze(self):
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self):
        self.frozen = False
        self.requires_grad = True

    def __repr__(self):
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name!r}, shape={self.shape}, {state})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def matmul(a, b):
    """Matrix product over the last two axes, batching over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor._make(x @ y, (a, b), back)


def concat(tensors, axis=0):
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def softmax(x, axis=-1):
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), back)


def log_softmax(x, axis=-1):
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), back)


def cross_entropy(logits, targets, reduction="mean", ignore_index=None):
    """Token-level cross-entropy of ``logits[..., V]`` against integer targets.

    Positions whose target equals ``ignore_index`` contribute nothing and are
    excluded from the mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    if targets.size == 0:
        raise ContractError("cross_entropy needs at least one target")
    vocab = logits.shape[-1]
    keep = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    live = targets[keep]
    if live.size and (live.min() < 0 or live.max() >= vocab):
        bad = live[(live < 0) | (live >= vocab)][0]
        raise IndexError(f"target index {bad} out of range for vocabulary of {vocab}")
    if np.isnan(logits.data).any():
        raise NumericError("cross_entropy received NaN logits")

    flat = logits.data.reshape(-1, vocab)
    idx = np.where(keep, targets, 0).reshape(-1)
    mask = keep.reshape(-1).astype(np.float64)
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = (lse - shifted[np.arange(len(idx)), idx]) * mask
    if reduction == "mean":
        denom = mask.sum()
        if denom == 0:
            raise ContractError("every target is ignored")
    elif reduction == "sum":
        denom = 1.0
    else:
        raise ContractError(f"unknown reduction {reduction!r}")
    total = nll.sum() / denom

    def back(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(len(idx)), idx] -= 1.0
        probs *= (mask * (g / denom))[:, None]
        return (probs.reshape(logits.shape),)

    return Tensor._make(np.asarray(total), (logits,), back)


def gelu(x):
    """Tanh approximation of GELU."""
    a = x.data
    c = math.sqrt(2.0 / math.pi)
    a2 = a * a
    t = np.tanh(c * (a + 0.044715 * a2 * a))
    out = 0.5 * a * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3 * 0.044715 * a2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (x,), back)


def layer_norm(x, weight, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    centered = a - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * weight.data + bias.data

    def back(g):
        gw = _unbroadcast(g * xhat, weight.shape)
        gb = _unbroadcast(g, bias.shape)
        gx_hat = g * weight.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gw, gb

    return Tensor._make(out, (x, weight, bias), back)


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"embedding index out of range for table with {rows} rows")

    def back(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor._make(table.data[ids], (table,), back)


def mse(pred, target):
    diff = pred - target
    return (diff * diff).mean()
