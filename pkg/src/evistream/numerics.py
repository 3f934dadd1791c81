"""Dense tensors with reverse-mode differentiation and an AdamW optimizer.

Every value is a :class:`Tensor` wrapping a numpy array.  Operations record
their parents and a backward closure; :func:`backward` walks the recorded
graph in reverse topological order and accumulates ``.grad`` on every node
that requires it.  The default dtype is float32; :func:`verification_mode`
switches newly created tensors to float64 for gradient checks.
"""

from __future__ import annotations

import contextlib
import json
import math
from pathlib import Path

import numpy as np
from scipy.special import erf

_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def verification_mode():
    """Create tensors in float64 inside the block."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (evaluation only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=_DTYPE) if not isinstance(data, np.ndarray) or data.dtype != _DTYPE else data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data, parents, backward):
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True) if g.dtype != t.data.dtype else g.copy()
    else:
        t.grad += g


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw)


def gelu(x):
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out = (xd * cdf).astype(xd.dtype)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        _accum(x, g * (cdf + xd * pdf))

    return _make(out, (x,), bw)


def log(x):
    xd = x.data
    out = np.log(xd)

    def bw(g):
        _accum(x, g / xd)

    return _make(out, (x,), bw)


# ----------------------------------------------------------------------
# linear algebra and shape
# ----------------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes; leading axes must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                _accum(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw)


def reshape(x, shape):
    orig = x.shape
    out = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(orig))

    return _make(out, (x,), bw)


def transpose(x, axes=()):
    if not axes:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)
    out = np.transpose(x.data, axes)

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return _make(out, (x,), bw)


def roll(x, shifts, axes):
    out = np.roll(x.data, shifts, axes)
    neg = tuple(-s for s in shifts)

    def bw(g):
        _accum(x, np.roll(g, neg, axes))

    return _make(out, (x,), bw)


def getitem(x, idx):
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum(x, full)

    return _make(out, (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accum(t, piece)

    return _make(out, tuple(tensors), bw)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(out, dtype=x.data.dtype), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def tmax(x, axis=0):
    """Max reduction; ties send the gradient to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        _accum(x, full)

    return _make(out, (x,), bw)


# ----------------------------------------------------------------------
# normalisations
# ----------------------------------------------------------------------


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), bw)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        s = np.exp(out)
        _accum(x, g - s * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, xd.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            d = xd.shape[-1]
            gx = inv / d * (d * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
            _accum(x, gx)

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


def cross_entropy_loss(logits, label):
    """Negative log-likelihood of ``label`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    c = logits.shape[-1]
    if logits.ndim != 1 or c < 2:
        raise DimensionError(f"expected a vector of at least 2 logits, got {logits.shape}")
    if not 0 <= int(label) < c:
        raise IndexError(f"label {label} out of range for {c} classes")
    return mul(log_softmax(logits)[int(label)], -1.0)


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # intermediates are not kept
    return loss


# ----------------------------------------------------------------------
# parameters, initialisation, optimiser
# ----------------------------------------------------------------------


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    shape = shape or (fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Named trainable tensors plus AdamW moment buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=_DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def grads(self):
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state):
        for k, arr in state.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if arr.shape != self.params[k].shape:
                raise DimensionError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=self.params[k].data.dtype)

    def num_values(self):
        return sum(t.data.size for t in self.params.values())


def adamw_step(store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam update over every parameter in ``store``."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= (1.0 - lr * weight_decay)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype)
    return store


# ----------------------------------------------------------------------
# checkpoint files
# ----------------------------------------------------------------------


def save_checkpoint(store, path):
    """Write ``<path>.bin`` (little-endian float32) and ``<path>.json`` (index)."""
    path = Path(path)
    index, chunks, offset = {}, [], 0
    for name in sorted(store.params):
        arr = np.ascontiguousarray(store.params[name].data, dtype="<f4")
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Read a checkpoint pair back into ``{name: float32 array}``."""
    path = Path(path)
    index = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    out = {}
    for name, entry in index.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"])
        out[name] = arr.reshape(shape).astype(np.float32)
    return out
