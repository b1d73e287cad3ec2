"""Dense n-way tensors with reverse-mode automatic differentiation.

A small set of primitives (matmul, softmax, layer norm, dropout, embedding
lookup, reshapes) backed by numpy buffers and recorded on an explicit
gradient tape. 32-bit floats are the training default; gradient checking
requires 64-bit buffers, where central differences are trustworthy.

Tensors are immutable after construction except for gradient accumulation.
A tape must be active (``with Tape(): ...``) for operations to be recorded;
outside a tape the same functions run as plain numpy computations.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "permute",
    "narrow",
    "embedding_lookup",
    "softmax",
    "mask_fill",
    "layer_norm",
    "relu",
    "absolute",
    "dropout",
    "reduce_sum",
    "backward",
    "grad_check",
]


class Tape:
    """Ordered record of executed primitives.

    Each primitive executed while a tape is active appends one record;
    ``backward`` replays the records in exact reverse execution order.
    A tape is one-shot: running backward through it twice raises.
    """

    _active: "Tape | None" = None

    def __init__(self) -> None:
        self._records: list = []  # (out, inputs, backward_fn)
        self._consumed = False
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        self._outer = Tape._active
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        Tape._active = self._outer
        return False

    def __len__(self) -> int:
        return len(self._records)


class Tensor:
    """A dense row-major array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        if isinstance(data, (np.ndarray, np.generic)):
            arr = np.asarray(data)
            self.data = arr if dtype is None or arr.dtype == dtype else arr.astype(dtype)
        else:
            self.data = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level primitives
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = Tape._active
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._records.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _record(data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def bwd(g):
        return (g * s,)

    return _record(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ⟨...,M,K⟩ @ ⟨...,K,R⟩ with broadcast leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}") from e

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _record(data, (a, b), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    """Reinterpret axes without reordering data (row-major view)."""
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view shape {x.data.shape} as {tuple(shape)}") from e

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _record(data, (x,), bwd)


def permute(x: Tensor, axes) -> Tensor:
    """Materializing axis permutation (backward applies the inverse permutation)."""
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of axes of shape {x.data.shape}")
    data = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _record(data, (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into a zero buffer."""
    if not 0 <= start and start + length <= x.data.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of shape {x.data.shape}"
        )
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _record(data, (x,), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer index; backward scatter-adds."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.data.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        offending = int(ids[bad].flat[0])
        raise IndexError(f"embedding id {offending} out of range for table with {vocab} rows")
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(data, (table,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``.

    Entries equal to -inf act as a mask and map to exactly 0; a slice that is
    entirely masked yields an all-zero slice rather than NaN, so fully padded
    rows contribute nothing downstream.
    """
    d = x.data
    if not -d.ndim <= axis < d.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {d.shape}")
    m = np.max(d, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, d.dtype.type(0))
    e = np.exp(d - shift)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s == 0, d.dtype.type(1), s)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _record(y, (x,), bwd)


def mask_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (mask is a constant)."""
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, x.data.dtype.type(value), x.data)

    def bwd(g):
        return (_unbroadcast(np.where(mask, g.dtype.type(0), g), x.data.shape),)

    return _record(data, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data
    if d.ndim == 0 or d.shape[-1] == 0:
        raise ShapeError(f"layer_norm: last axis of shape {d.shape} must be non-empty")
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        gs = g * gain.data
        m1 = gs.mean(axis=-1, keepdims=True)
        m2 = (gs * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gs - m1 - xhat * m2)
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), bwd)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, x.data.dtype.type(0))

    def bwd(g):
        return (g * (x.data > 0),)

    return _record(data, (x,), bwd)


def absolute(x: Tensor) -> Tensor:
    data = np.abs(x.data)

    def bwd(g):
        return (g * np.sign(x.data),)

    return _record(data, (x,), bwd)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero elements with probability ``p`` and rescale survivors by 1/(1-p).

    Identity when not training or when p == 0. The rng stream must be passed
    explicitly so runs are reproducible.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode requires an rng stream")
    keep = rng.random(x.data.shape) >= p
    m = keep.astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    data = x.data * m

    def bwd(g):
        return (g * m,)

    return _record(data, (x,), bwd)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    data = x.data.sum(axis=axis)
    if axis is None:
        def bwd(g):
            return (np.full_like(x.data, g),)
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.data.ndim for a in axes)

        def bwd(g):
            gg = g
            for a in sorted(axes):
                gg = np.expand_dims(gg, a)
            return (np.broadcast_to(gg, x.data.shape),)

    return _record(data, (x,), bwd)


def backward(loss: Tensor) -> None:
    """Populate gradients of every ``requires_grad`` tensor reachable from ``loss``.

    Visits the recording tape in exact reverse execution order. May run once
    per tape; a second call without a fresh tape raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss is not attached to a gradient tape")
    if tape._consumed:
        raise RuntimeError("gradient tape already consumed; build a fresh tape to run backward again")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, inputs, bwd in reversed(tape._records):
        g = out.grad
        if g is None:
            continue
        for t, gi in zip(inputs, bwd(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += gi


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar Tensor. The probe tensor must be float64;
    finite differences are unreliable at 32-bit. The relative error uses
    denominator max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    if x.data.dtype != np.float64:
        raise ConfigError("grad_check requires a float64 tensor")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape():
        out = f(probe)
        backward(out)
    if probe.grad is None:
        analytic = np.zeros(probe.data.size)
    else:
        analytic = probe.grad.reshape(-1).copy()
    flat = probe.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(probe).data)
        flat[i] = orig - eps
        fm = float(f(probe).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    if flat.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
