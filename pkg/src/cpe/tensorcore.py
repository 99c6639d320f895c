"""Minimal dense-array engine with tape-based reverse-mode differentiation.

Tensors wrap float64 numpy arrays. Differentiable operations record a
backward closure on the innermost active :class:`Tape`; ``Tape.backward``
replays the records in exact reverse execution order and accumulates
gradients into ``Tensor.grad``. With no tape active every operation is a
plain forward evaluation, which keeps inference paths cheap.

The engine is deliberately small: it implements exactly the operations
the detection model needs, always in double precision, with numpy as the
array substrate.
"""

from __future__ import annotations

import struct
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "reciprocal",
    "absolute",
    "clamp",
    "softmax",
    "softmax_rows",
    "softmax_cols",
    "concat",
    "stack",
    "slice_axis",
    "reshape",
    "transpose",
    "take_rows",
    "scatter_rows",
    "gather",
    "sum_",
    "mean",
    "binary_cross_entropy",
    "grad_check",
    "zeros",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

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

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(c))

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return absolute(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []
        self._spent = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Backpropagate from a scalar loss through every recorded op."""
        if self._spent:
            raise RuntimeError("tape already backpropagated; record a fresh tape")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for out, backward in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            backward(g)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        tape = _active_tape()
        if tape is not None:
            tape._records.append((out, backward))
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    """Matrix product; supports stacked (batched) operands via numpy rules."""
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if ga.ndim > a.ndim:
                ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
            _accum(a, ga)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if gb.ndim > b.ndim:
                gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
            _accum(b, gb)

    return _make(data, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make(-a.data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - y * y))

    return _make(y, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * y)

    return _make(y, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / a.data

    def backward(g):
        if a.requires_grad:
            _accum(a, -g * y * y)

    return _make(y, (a,), backward)


def absolute(a) -> Tensor:
    """Elementwise |x| with subgradient 0 at x = 0."""
    a = as_tensor(a)
    s = np.sign(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _make(np.abs(a.data), (a,), backward)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through the unclipped region only."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def softmax(a, axis: int) -> Tensor:
    """Max-shifted exponential softmax along ``axis``."""
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise ValueError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), backward)


def softmax_rows(a) -> Tensor:
    """Softmax over the class axis: every row sums to 1."""
    return softmax(a, axis=-1)


def softmax_cols(a) -> Tensor:
    """Softmax over the proposal axis of an N x C matrix: columns sum to 1."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"softmax_cols expects a 2-D matrix, got shape {a.shape}")
    return softmax(a, axis=0)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    split_at = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, split_at, axis=axis)):
            if t.requires_grad:
                _accum(t, piece)

    return _make(data, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        pieces = np.moveaxis(g, axis, 0)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accum(t, piece)

    return _make(data, tuple(tensors), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[index] = g
            _accum(a, ga)

    return _make(a.data[index], (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def take_rows(a, idx) -> Tensor:
    """Gather along the first axis."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga)

    return _make(a.data[idx], (a,), backward)


def scatter_rows(n: int, groups) -> Tensor:
    """Assemble an output whose first axis merges disjoint row groups.

    ``groups`` is a sequence of (row_indices, tensor) pairs whose indices
    partition range(n).
    """
    groups = [(np.asarray(idx, dtype=np.int64), as_tensor(t)) for idx, t in groups]
    total = sum(len(idx) for idx, _ in groups)
    if total != n:
        raise ValueError(f"row groups cover {total} rows, expected {n}")
    rest = groups[0][1].shape[1:]
    data = np.empty((n, *rest), dtype=np.float64)
    seen = np.zeros(n, dtype=bool)
    for idx, t in groups:
        if seen[idx].any():
            raise ValueError("row groups overlap")
        seen[idx] = True
        data[idx] = t.data

    def backward(g):
        for idx, t in groups:
            if t.requires_grad:
                _accum(t, g[idx])

    return _make(data, tuple(t for _, t in groups), backward)


def gather(a, flat_idx) -> Tensor:
    """Pick entries of ``a`` by flat index; output has the index's shape."""
    a = as_tensor(a)
    flat_idx = np.asarray(flat_idx, dtype=np.int64)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros(a.size)
            np.add.at(ga, flat_idx.ravel(), g.ravel())
            _accum(a, ga.reshape(a.shape))

    return _make(a.data.ravel()[flat_idx], (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[i] for i in axis]))
    else:
        count = a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def binary_cross_entropy(probs, targets, eps: float = 1e-8) -> Tensor:
    """Summed BCE between probabilities and {0,1} targets.

    Probabilities are clamped to [eps, 1 - eps] so the loss stays finite
    at the score extremes.
    """
    probs = as_tensor(probs)
    y = np.asarray(as_tensor(targets).data)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("targets must be binary")
    p = clamp(probs, eps, 1.0 - eps)
    loss = mul(log(p), y) + mul(log(sub(1.0, p)), 1.0 - y)
    return neg(sum_(loss))


def grad_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a re-evaluable function of no arguments returning a
    scalar Tensor that depends on ``params``. The error at each entry is
    |analytic - numeric| / max(1, |analytic|).
    """
    params = list(params)
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued f, got shape {loss.shape}")
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.ravel()
        ana_flat = ana.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]))
            if err > worst:
                worst = err
    return worst


CHECKPOINT_MAGIC = b"CPE-CKPT-1\n"


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays as length-prefixed little-endian records."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a CPE checkpoint: bad header {magic!r}")

        def read_u64() -> int:
            raw = fh.read(8)
            if len(raw) != 8:
                raise ValueError("truncated checkpoint")
            return struct.unpack("<Q", raw)[0]

        out: dict[str, np.ndarray] = {}
        for _ in range(read_u64()):
            name = fh.read(read_u64()).decode("utf-8")
            ndim = read_u64()
            shape = tuple(read_u64() for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError("truncated checkpoint")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        return out
