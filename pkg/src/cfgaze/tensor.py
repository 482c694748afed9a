"""Dense float tensors with reverse-mode automatic differentiation.

Gradients are recorded on an explicit tape: every differentiable op appends
a backward closure while a Tape is active, and ``backward()`` replays the
closures in reverse record order. Ops executed outside a tape are pure
forward computations (inference mode).

float32 is the training dtype; float64 is used for gradient checking.
Binary elementwise ops require exactly matching shapes (no broadcasting);
use ``expand0``/``reshape`` to line shapes up explicitly.
"""

from __future__ import annotations

import struct

import numpy as np

_SUPPORTED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """backward() called without a live, unused tape."""


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of differentiable ops executed inside its context.

    Single-threaded use only. One backward pass per tape; build a fresh
    tape for every forward pass.
    """

    def __init__(self):
        self._nodes = []  # (output Tensor, backward closure), execution order
        self._open = False
        self._used = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        self._open = True
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        self._open = False
        # break tensor<->tape reference cycles so big graphs free by refcount
        self._nodes.clear()
        return False

    def __len__(self):
        return len(self._nodes)


def active_tape():
    return _ACTIVE_TAPE


class Tensor:
    """N-dimensional float array, optionally tracked for gradients.

    ``data`` is immutable by convention once the tensor has entered a
    graph; ``grad`` is the only mutating slot (accumulated with +=,
    cleared via ``zero_grad``).
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = np.float32  # lists/python scalars default to the training dtype
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def backward(self):
        backward(self)

    # operator sugar; tensor-tensor ops are strict about shape
    def __add__(self, other):
        return add(self, _as_tensor_like(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor_like(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self):
        return mean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"


def _as_tensor_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(ref.shape, float(x), dtype=ref.dtype))


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _make_output(data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap op output; record the backward closure if a tape is live."""
    tape = _ACTIVE_TAPE
    track = tape is not None and tape._open and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out._tape = tape
        tape._nodes.append((out, backward_fn))
    return out


def backward(root: Tensor):
    """Accumulate d(root)/d(ancestor) into .grad of every tracked ancestor.

    root must be a scalar recorded on the currently active tape. The tape
    is consumed: a second backward on it raises.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {tuple(root.shape)}")
    tape = root._tape
    if tape is None:
        raise TapeError("tensor was not recorded on any tape (no grad-requiring inputs?)")
    if tape is not _ACTIVE_TAPE or not tape._open:
        raise TapeError("stale tape: backward must run inside the tape that recorded the graph")
    if tape._used:
        raise TapeError("backward already ran on this tape; build a new tape")
    tape._used = True
    root.grad = np.ones_like(root.data)
    for out, fn in reversed(tape._nodes):
        if out.grad is not None:
            fn(out.grad)
    tape._nodes.clear()


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make_output(a.data + b.data, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make_output(a.data - b.data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def _bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make_output(a.data * b.data, (a, b), _bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)

    def _bw(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _make_output(a.data / b.data, (a, b), _bw)


def scale(a: Tensor, c: float) -> Tensor:
    def _bw(g):
        _accumulate(a, g * c)

    return _make_output(a.data * c, (a,), _bw)


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is defined as 0
    mask = a.data > 0

    def _bw(g):
        _accumulate(a, g * mask)

    return _make_output(np.where(mask, a.data, 0), (a,), _bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def _bw(g):
        _accumulate(a, g * (1 - y * y))

    return _make_output(y, (a,), _bw)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1 / (1 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    y[~pos] = e / (1 + e)

    def _bw(g):
        _accumulate(a, g * y * (1 - y))

    return _make_output(y, (a,), _bw)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def _bw(g):
        _accumulate(a, g * 0.5 / y)

    return _make_output(y, (a,), _bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only strictly inside."""
    inside = (a.data > lo) & (a.data < hi)

    def _bw(g):
        _accumulate(a, g * inside)

    return _make_output(np.clip(a.data, lo, hi), (a,), _bw)


def acos(a: Tensor) -> Tensor:
    """Plain arccos; derivative diverges as |x| -> 1 (no safety clamp)."""

    def _bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            _accumulate(a, -g / np.sqrt(1 - a.data * a.data))

    with np.errstate(invalid="ignore"):  # out-of-domain input propagates as NaN
        return _make_output(np.arccos(a.data), (a,), _bw)


def acos_clamped(a: Tensor, eps: float = 1e-7) -> Tensor:
    """Gradient-safe arccos of a cosine ratio.

    Forward clips to [-1, 1] (identical inputs give exactly 0); the
    derivative is evaluated at the ratio clipped to [-1+eps, 1-eps] so
    it stays finite near parallel / antiparallel vectors.
    """
    safe = np.clip(a.data, -1 + eps, 1 - eps)

    def _bw(g):
        _accumulate(a, -g / np.sqrt(1 - safe * safe))

    return _make_output(np.arccos(np.clip(a.data, -1.0, 1.0)), (a,), _bw)


# ---------------------------------------------------------------------------
# linear algebra / structure ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")

    def _bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make_output(a.data @ b.data, (a, b), _bw)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat: rank mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    for ax in range(a.data.ndim):
        if ax != axis % a.data.ndim and a.shape[ax] != b.shape[ax]:
            raise ShapeError(
                f"concat: shapes {tuple(a.shape)} and {tuple(b.shape)} differ on non-concat axis {ax}")
    if a.dtype != b.dtype:
        raise ShapeError(f"concat: dtype mismatch {a.dtype} vs {b.dtype}")
    na = a.shape[axis]

    def _bw(g):
        ga, gb = np.split(g, [na], axis=axis)
        _accumulate(a, ga)
        _accumulate(b, gb)

    return _make_output(np.concatenate([a.data, b.data], axis=axis), (a, b), _bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max subtraction)."""
    if x.data.size == 0:
        raise ShapeError("softmax on empty tensor")
    if np.isnan(x.data).any():
        raise ValueError("softmax input contains NaN")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def _bw(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        _accumulate(x, y * (g - inner))

    return _make_output(y, (x,), _bw)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def _bw(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), shape))

    return _make_output(np.sum(x.data, axis=axis), (x,), _bw)


def mean(x: Tensor) -> Tensor:
    return scale(tensor_sum(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def _bw(g):
        _accumulate(x, g.reshape(old))

    return _make_output(x.data.reshape(shape), (x,), _bw)


def expand0(x: Tensor, n: int) -> Tensor:
    """Replicate a (D,) vector into (n, D) rows; backward sums the rows."""
    if x.data.ndim != 1:
        raise ShapeError(f"expand0 expects a 1-D tensor, got shape {tuple(x.shape)}")

    def _bw(g):
        _accumulate(x, g.sum(axis=0))

    return _make_output(np.broadcast_to(x.data, (n, x.shape[0])).copy(), (x,), _bw)


def expand1(x: Tensor, d: int) -> Tensor:
    """Replicate an (N, 1) column into (N, d); backward sums the columns."""
    if x.data.ndim != 2 or x.shape[1] != 1:
        raise ShapeError(f"expand1 expects an (N, 1) tensor, got shape {tuple(x.shape)}")

    def _bw(g):
        _accumulate(x, g.sum(axis=1, keepdims=True))

    return _make_output(np.broadcast_to(x.data, (x.shape[0], d)).copy(), (x,), _bw)


def column(x: Tensor, j: int) -> Tensor:
    """Extract column j of a 2-D tensor as (N, 1)."""
    if x.data.ndim != 2:
        raise ShapeError(f"column expects a 2-D tensor, got shape {tuple(x.shape)}")
    cols = x.shape[1]

    def _bw(g):
        full = np.zeros((x.shape[0], cols), dtype=x.dtype)
        full[:, j:j + 1] = g
        _accumulate(x, full)

    return _make_output(x.data[:, j:j + 1].copy(), (x,), _bw)


# ---------------------------------------------------------------------------
# serialization: magic "T32\0", u8 rank, rank*u32 dims, float32 payload (LE)

_TENSOR_MAGIC = b"T32\x00"


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim > 255:
        raise ShapeError("rank exceeds serialization limit")
    header = _TENSOR_MAGIC + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Parse one serialized tensor; returns (array, next offset)."""
    if buf[offset:offset + 4] != _TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic at offset {offset}")
    offset += 4
    rank = struct.unpack_from("<B", buf, offset)[0]
    offset += 1
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    end = offset + 4 * count
    if end > len(buf):
        raise ValueError(f"truncated tensor payload: need {end} bytes, have {len(buf)}")
    arr = np.frombuffer(buf[offset:end], dtype="<f4").reshape(dims).copy()
    return arr, end
