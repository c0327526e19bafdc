"""Minimal reverse-mode autodiff over dense float tensors.

Tensors wrap numpy arrays (float32 by default, float64 available for
high-precision gradient checks). Operations record themselves on the
active ComputationTape when any input requires gradients; backward()
replays the tape in reverse creation order with pass-local gradient
buffers, then deposits additively into `.grad` — so running backward
twice without a reset doubles the stored gradients.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    """Dense real tensor with optional gradient tracking.

    data is stored row-major (C order). `grad` is allocated lazily on the
    first backward pass and always matches `data`'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g if isinstance(g, np.ndarray) and g.base is None else np.array(g)
        else:
            self.grad += g

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


class ComputationTape:
    """Ordered record of primitive operations.

    Nodes are appended in creation order, so every node's parents appear
    earlier (topological order). The backward pass walks the record once
    in reverse, visiting only nodes reachable from the loss.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._prev = None

    def record(self, t: Tensor):
        self.nodes.append(t)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None
        return False

    def backward(self, loss: Tensor):
        """Propagate gradients from a scalar loss through the record."""
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        needed = set()
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in needed:
                continue
            needed.add(id(t))
            stack.extend(t._parents)
        # pass-local buffers keyed by node identity; deposited at the end
        local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: list[Tensor] = [loss]
        for node in reversed(self.nodes):
            g = local.get(id(node))
            if g is None or node._backward is None or id(node) not in needed:
                continue
            for parent, contrib in zip(node._parents, node._backward(g)):
                if contrib is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in local:
                    local[key] += contrib
                else:
                    # adopt freshly allocated arrays; copy views and
                    # pass-throughs of g, which may alias other buffers
                    if contrib is g or contrib.base is not None:
                        contrib = contrib.copy()
                    local[key] = contrib
                    touched.append(parent)
        for t in touched:
            if t.requires_grad:
                t._accumulate(local[id(t)])


_ACTIVE_TAPE: ComputationTape | None = None


def active_tape() -> ComputationTape | None:
    return _ACTIVE_TAPE


def backward(loss: Tensor):
    """Populate gradients of all requires_grad tensors feeding a scalar loss.

    Gradients accumulate additively: calling backward twice without
    zero_grad doubles them.
    """
    if _ACTIVE_TAPE is None:
        raise RuntimeError("backward called with no active ComputationTape")
    _ACTIVE_TAPE.backward(loss)


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._op = op
    if out.requires_grad and _ACTIVE_TAPE is not None:
        out._parents = tuple(parents)
        out._backward = backward_fn
        _ACTIVE_TAPE.record(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives ----------------------------------------------------------------


def add(a, b):
    a = _coerce(a)
    b = _coerce(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(data, (a, b), bwd, "add")


def mul(a, b):
    a = _coerce(a)
    b = _coerce(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(data, (a, b), bwd, "mul")


def matmul(a, b):
    a = _coerce(a)
    b = _coerce(b, like=a)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = a.data @ b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                # dense-layer case: fold batch dims into one GEMM instead of
                # materializing a batched [.., K, M] intermediate
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), bwd, "matmul")


def relu(x):
    x = _coerce(x)
    data = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _make(data, (x,), bwd, "relu")


def gelu(x):
    """GELU, tanh approximation (GPT-family convention)."""
    x = _coerce(x)
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * (v + 0.044715 * (v2 * v)))
    data = 0.5 * v * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * v * sech2 * (_GELU_C * (1.0 + 0.134145 * v2))
        return (g * d,)

    return _make(data, (x,), bwd, "gelu")


def softmax(x, axis=-1):
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make(data, (x,), bwd, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply affine gain and bias.

    A constant input row has zero variance; eps keeps the output finite
    (all zeros before the affine terms).
    """
    x = _coerce(x)
    gain = _coerce(gain, like=x)
    bias = _coerce(bias, like=x)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match feature dim ({n},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gain.data * xhat + bias.data

    def bwd(g):
        dx = dgain = dbias = None
        if gain.requires_grad:
            dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            dbias = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gain.data
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            dx = inv / n * (n * dxhat - s1 - xhat * s2)
        return dx, dgain, dbias

    return _make(data, (x, gain, bias), bwd, "layer_norm")


def embedding_gather(table, ids):
    """Gather rows of `table` ([V, D]) at integer `ids` (any shape)."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_gather: id out of range for table with {table.shape[0]} rows"
        )
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(data, (table,), bwd, "embedding_gather")


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}"
        )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                outs.append(g[tuple(idx)])
            else:
                outs.append(None)
        return tuple(outs)

    return _make(data, tuple(tensors), bwd, "concat")


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice, type(None), type(Ellipsis)))
               for p in parts)


def slice_(x, idx):
    """Basic slicing/indexing; gradient scatters back into the source."""
    x = _coerce(x)
    data = x.data[idx]
    basic = _is_basic_index(idx)

    def bwd(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.ascontiguousarray(data), (x,), bwd, "slice")


def reshape(x, shape):
    x = _coerce(x)
    data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _make(data, (x,), bwd, "reshape")


def transpose(x, axes=None):
    x = _coerce(x)
    data = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _make(data, (x,), bwd, "transpose")


def sum_(x, axis=None, keepdims=False):
    x = _coerce(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _make(np.asarray(data), (x,), bwd, "sum")


def mean_(x, axis=None, keepdims=False):
    x = _coerce(x)
    denom = x.size if axis is None else x.shape[axis]
    s = sum_(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / denom)


def cross_entropy(logits, targets, pad_id=0):
    """Mean token negative log-likelihood with padding positions excluded.

    logits: [..., S, V]; targets: integer array [..., S]. Positions whose
    target equals pad_id contribute zero loss and zero gradient. All-pad
    targets are rejected (no supervised positions).
    """
    logits = _coerce(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        )
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    mask = tflat != pad_id
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: all targets are padding, nothing to supervise")
    if tflat[mask].min() < 0 or tflat[mask].max() >= v:
        raise ShapeError(f"cross_entropy: target id out of range [0, {v})")
    m = flat.max(axis=-1, keepdims=True)
    shifted = flat - m
    lse = np.log(np.exp(shifted).sum(axis=-1)) + m[:, 0]
    nll = lse - flat[np.arange(flat.shape[0]), tflat]
    data = np.asarray((nll * mask).sum() / n_valid, dtype=logits.dtype)

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(flat.shape[0]), tflat] -= 1.0
        p *= (mask / n_valid)[:, None]
        return ((g * p).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _make(data, (logits,), bwd, "cross_entropy")


# Public dispatch surface for the primitive set. Extra internal ops
# (reshape/transpose/sum) exist as functions but are not part of this enum.
_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu_or_gelu": None,  # resolved via the `variant` kwarg
    "softmax": softmax,
    "layer_norm": layer_norm,
    "embedding_gather": embedding_gather,
    "concat": concat,
    "slice": slice_,
}


def forward_primitive(op_kind, inputs, **kwargs):
    """Apply a named primitive to a list of inputs.

    op_kind must be one of: matmul, add, mul, relu_or_gelu, softmax,
    layer_norm, embedding_gather, concat, slice.
    """
    if op_kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {op_kind!r}")
    if op_kind == "relu_or_gelu":
        variant = kwargs.pop("variant", "gelu")
        fn = relu if variant == "relu" else gelu
        return fn(inputs[0], **kwargs)
    if op_kind == "concat":
        return concat(inputs, **kwargs)
    if op_kind == "slice":
        return slice_(inputs[0], kwargs.pop("idx"))
    return _PRIMITIVES[op_kind](*inputs, **kwargs)
