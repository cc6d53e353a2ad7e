"""Dense float64 tensors with tape-based reverse-mode differentiation.

Storage and kernels are numpy arrays; the graph is rebuilt on every forward
pass and walked once by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import struct
import zlib
from pathlib import Path

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """A float64 array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite values produced by op '{_op}'")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- bookkeeping ---------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    # -- operator sugar ------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, _op=op)


# -- elementwise -------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def power(a, p):
    a = as_tensor(a)
    p = float(p)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), bw, "pow")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


# -- reductions and shape ---------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a, idx):
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def shift(a, steps, axis=-2):
    """Delay ``a`` by ``steps`` along ``axis``, zero-filling the front (causal shift)."""
    if steps == 0:
        return a
    n = a.shape[axis]
    steps = min(steps, n)
    pad = [(0, 0)] * a.ndim
    pad[axis] = (steps, 0)
    out = np.pad(a.data, pad)
    out = np.take(out, np.arange(n), axis=axis)

    def bw(g):
        gp = [(0, 0)] * a.ndim
        gp[axis] = (0, steps)
        return (np.take(np.pad(g, gp), np.arange(steps, steps + n), axis=axis),)

    return _make(out, (a,), bw, "shift")


# -- linear algebra ----------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; with ``mask`` the weights are ``M*exp(x) / sum(M*exp(x))``.

    Mask entries of zero get exactly zero weight. A row with no admissible
    entry has no valid distribution and raises ``ValueError``.
    """
    x = as_tensor(x)
    if mask is None:
        m = x.data.max(axis=axis, keepdims=True)
        e = np.exp(x.data - m)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        admissible = mask > 0
        if not np.broadcast_to(admissible, x.shape).any(axis=axis).all():
            raise ValueError("mask has a row with no admissible entry")
        m = np.where(admissible, x.data, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(admissible, np.exp(np.minimum(x.data - m, 0.0)), 0.0) * mask
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def softmax_rows(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-D tensor, got shape {x.shape}")
    return softmax(x, axis=-1)


def layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gain + bias


# -- differentiation ---------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss):
    """Populate ``.grad`` on every requires-grad leaf reachable from a scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- randomness --------------------------------------------------------

class Rng:
    """Seeded counter-based (Philox) stream keyed by consumer name.

    Streams for different consumers are independent, so adding a consumer
    never perturbs another one's draws.
    """

    def __init__(self, seed, consumer="main"):
        self.seed = int(seed)
        self.consumer = consumer
        key = zlib.crc32(consumer.encode())
        ss = np.random.SeedSequence(self.seed, spawn_key=(key,))
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, name):
        return Rng(self.seed, f"{self.consumer}/{name}")

    def normal(self, shape):
        return self.generator.standard_normal(shape)

    def integers(self, low, high, size=None):
        return self.generator.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)


def gaussian(shape, rng, requires_grad=False):
    return Tensor(rng.normal(shape), requires_grad=requires_grad)


# -- optimisation ------------------------------------------------------

def adam_step(params, grads, lr, state, betas=(0.9, 0.999), eps=1e-8):
    """In-place Adam update with bias correction.

    ``params``/``grads`` are parallel sequences of arrays; ``state`` is a dict
    carrying the step count and moment buffers between calls.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    b1, b2 = betas
    t = state.get("t", 0) + 1
    state["t"] = t
    ms = state.setdefault("m", [np.zeros_like(p) for p in params])
    vs = state.setdefault("v", [np.zeros_like(p) for p in params])
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, ms, vs):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params, lr=1e-4, decay=1.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.decay = decay
        self.betas = betas
        self.eps = eps
        self.state = {}

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.lr, self.state, self.betas, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def end_epoch(self):
        self.lr *= self.decay


# -- checkpoints -------------------------------------------------------

MAGIC = b"STKDIFF\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named):
    """Write ``{name: array}`` in the versioned little-endian binary format."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(named))
    for name, arr in named.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode()
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = len(MAGIC)
    try:
        version, count = struct.unpack_from("<II", blob, off)
        off += 8
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + n].decode()
            off += n
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if off + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated payload for '{name}'")
            out[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).copy()
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes")
    return out
