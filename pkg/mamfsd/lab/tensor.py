"""
MAM-FSD Tensor Core
Dense tensors with reverse-mode differentiation over the operator set the model needs

Values are stored in 32-bit reals and every forward and backward computation
accumulates in 64-bit. Gradients are kept in 64-bit. Shapes must match
exactly; there is no broadcasting.
"""

import itertools
import logging
from contextlib import contextmanager
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .base import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

# ============================================================================
# STORAGE PRECISION
# ============================================================================

ACCUM = np.float64
_storage = np.float32
_creation = itertools.count()


def storage_dtype():
    """Current storage dtype for tensor values."""
    return _storage


@contextmanager
def float64_storage():
    """Store tensor values in 64-bit inside the block (gradient checks, oracles)."""
    global _storage
    previous = _storage
    _storage = np.float64
    try:
        yield
    finally:
        _storage = previous


# ============================================================================
# TENSOR
# ============================================================================

class Tensor:
    """
    Immutable dense value plus gradient accumulator.

    ``data`` is row-major with the last axis fastest. ``grad`` is filled by
    :meth:`backward` for tensors with ``requires_grad`` and accumulates across
    calls until reset by the optimizer.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _ctx: Optional["Function"] = None):
        self.data = np.array(data, dtype=_storage)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._ctx = _ctx
        self._seq = next(_creation)
        self._released = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    dims = shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(dims={list(self.shape)}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """
        Propagate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Nodes are visited in exact reverse creation order, which is a reverse
        topological order because an op's output is always created after its
        inputs. The graph is released afterwards.

        Raises:
            GraphError: non-scalar root, root without grad, or a released graph
        """
        if self.shape != ():
            raise GraphError(f"backward needs a scalar root, got dims {list(self.shape)}")
        if self._released:
            raise GraphError("graph already released by a previous backward; rerun the forward pass")
        if not self.requires_grad:
            raise GraphError("root does not depend on any tensor that requires grad")

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._seq in nodes:
                continue
            nodes[t._seq] = t
            if t._ctx is not None:
                stack.extend(i for i in t._ctx.inputs if i.requires_grad)

        pending = {self._seq: np.ones((), dtype=ACCUM)}
        for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
            g = pending.pop(t._seq, None)
            if t._ctx is None:
                if g is not None:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            if g is not None:
                for inp, ig in zip(t._ctx.inputs, t._ctx.backward(g)):
                    if ig is None or not inp.requires_grad:
                        continue
                    key = inp._seq
                    pending[key] = ig if key not in pending else pending[key] + ig
            t._ctx = None
            t._released = True


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Leaf tensor that requires grad."""
    return Tensor(data, requires_grad=True, name=name)


def _require_same_dims(op: str, *tensors: Tensor) -> None:
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError(f"{op}: dims mismatch {list(first)} vs {list(t.shape)}")


# ============================================================================
# FUNCTION BASE
# ============================================================================

class Function:
    """
    Base class for differentiable operations.

    ``forward`` receives 64-bit copies of the input values and returns a
    64-bit array; ``backward`` receives dL/d(out) and returns one gradient per
    input (``None`` where no gradient flows).
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = np.asarray(fn.forward(*(t.data.astype(ACCUM) for t in inputs), **kwargs))
        requires_grad = any(t.requires_grad for t in inputs)
        with np.errstate(over='ignore'):
            result = Tensor(out, requires_grad=requires_grad, _ctx=fn if requires_grad else None)
        # checked after rounding to storage precision so overflow there counts too
        if not np.all(np.isfinite(result.data)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        return result


# ============================================================================
# CONVOLUTIONS
# ============================================================================

class Conv3dTemporal(Function):
    def forward(self, x, w, b, depthwise=False):
        c_in, t_len, h, wd = x.shape
        c_out, _, n = w.shape
        m = n // 2
        xp = np.zeros((c_in, t_len + 2 * m, h, wd), dtype=ACCUM)
        xp[:, m:m + t_len] = x
        out = np.empty((c_out, t_len, h, wd), dtype=ACCUM)
        out[...] = b[:, None, None, None]
        for k in range(n):
            window = xp[:, k:k + t_len]
            if depthwise:
                out += w[:, 0, k][:, None, None, None] * window
            else:
                out += np.tensordot(w[:, :, k], window, axes=([1], [0]))
        self.saved = (xp, w, depthwise, m, t_len)
        return out

    def backward(self, g):
        xp, w, depthwise, m, t_len = self.saved
        gw = np.zeros_like(w)
        gxp = np.zeros_like(xp)
        for k in range(w.shape[2]):
            window = xp[:, k:k + t_len]
            if depthwise:
                gw[:, 0, k] = np.sum(g * window, axis=(1, 2, 3))
                gxp[:, k:k + t_len] += w[:, 0, k][:, None, None, None] * g
            else:
                gw[:, :, k] = np.tensordot(g, window, axes=([1, 2, 3], [1, 2, 3]))
                gxp[:, k:k + t_len] += np.tensordot(w[:, :, k], g, axes=([0], [0]))
        return gxp[:, m:m + t_len], gw, g.sum(axis=(1, 2, 3))


def conv3d_temporal(x: Tensor, w: Tensor, b: Tensor, depthwise: bool = False) -> Tensor:
    """
    3D convolution with an N x 1 x 1 kernel over x: [C_in, T, H, W].

    out[co,t,i,j] = b[co] + sum_ci sum_{n=-m..m} x[ci,t+n,i,j] * w[co,ci,m+n]
    with zero padding of m = N // 2 frames per side, so T is preserved.
    With ``depthwise`` the kernel is [C, 1, N] and channels do not mix.
    """
    if x.data.ndim != 4 or w.data.ndim != 3:
        raise ShapeError(f"conv3d_temporal: expected x rank 4 and w rank 3, got {list(x.shape)}, {list(w.shape)}")
    c_out, w_in, n = w.shape
    if n % 2 == 0:
        raise ShapeError(f"conv3d_temporal: temporal kernel must be odd, got {n}")
    if depthwise:
        if w_in != 1 or c_out != x.shape[0]:
            raise ShapeError(f"conv3d_temporal: depthwise kernel {list(w.shape)} does not fit {x.shape[0]} channels")
    elif w_in != x.shape[0]:
        raise ShapeError(f"conv3d_temporal: kernel expects {w_in} input channels, x has {x.shape[0]}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv3d_temporal: bias dims {list(b.shape)} != [{c_out}]")
    return Conv3dTemporal.apply(x, w, b, depthwise=depthwise)


def _windows(xp, k, stride, h_out, w_out):
    """[N, C, h_out, w_out, k, k] strided view of the padded input."""
    view = sliding_window_view(xp, (k, k), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :h_out, :w_out]


class Conv2d(Function):
    def forward(self, x, w, b, stride=1, pad=0):
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        h, wd = x.shape[2:]
        k = w.shape[2]
        h_out = (h + 2 * pad - k) // stride + 1
        w_out = (wd + 2 * pad - k) // stride + 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = _windows(xp, k, stride, h_out, w_out)
        # one GEMM over (C_in, k, k): [N, h_out, w_out, C_out]
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])) + b
        self.saved = (xp, w, stride, pad, h_out, w_out, squeeze)
        out = out.transpose(0, 3, 1, 2)
        return out[0] if squeeze else out

    def backward(self, g):
        xp, w, stride, pad, h_out, w_out, squeeze = self.saved
        if squeeze:
            g = g[None]
        k = w.shape[2]
        cols = _windows(xp, k, stride, h_out, w_out)
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, w, axes=([1], [0]))   # [N, h_out, w_out, C_in, k, k]
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + stride * (h_out - 1) + 1, stride)
                cells = slice(j, j + stride * (w_out - 1) + 1, stride)
                gxp[:, :, rows, cells] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        h, wd = xp.shape[2] - 2 * pad, xp.shape[3] - 2 * pad
        gx = gxp[:, :, pad:pad + h, pad:pad + wd]
        return (gx[0] if squeeze else gx), gw, g.sum(axis=(0, 2, 3))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """
    Cross-correlation of x: [C_in, H, W] (or a frame batch [N, C_in, H, W])
    with w: [C_out, C_in, k, k].
    """
    if x.data.ndim not in (3, 4) or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected x rank 3/4 and w rank 4, got {list(x.shape)}, {list(w.shape)}")
    c_out, c_in, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if x.shape[-3] != c_in:
        raise ShapeError(f"conv2d: kernel expects {c_in} input channels, x has {x.shape[-3]}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias dims {list(b.shape)} != [{c_out}]")
    h, wd = x.shape[-2:]
    if (h + 2 * pad - k) // stride + 1 <= 0 or (wd + 2 * pad - k) // stride + 1 <= 0:
        raise ShapeError(f"conv2d: non-positive output extent for input {h}x{wd}, k={k}, stride={stride}, pad={pad}")
    return Conv2d.apply(x, w, b, stride=stride, pad=pad)


class Linear(Function):
    def forward(self, x, w, b=None):
        self.saved = (x, w)
        out = x @ w.T
        return out if b is None else out + b

    def backward(self, g):
        x, w = self.saved
        if x.ndim == 1:
            gw = np.outer(g, x)
            gb = g
        else:
            gw = g.T @ x
            gb = g.sum(axis=0)
        grads = [g @ w, gw]
        if len(self.inputs) == 3:
            grads.append(gb)
        return grads


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map of x: [D] or [N, D] by w: [O, D] and optional b: [O]."""
    if x.data.ndim not in (1, 2) or w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: cannot apply weight {list(w.shape)} to input {list(x.shape)}")
    if b is None:
        return Linear.apply(x, w)
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias dims {list(b.shape)} != [{w.shape[0]}]")
    return Linear.apply(x, w, b)


# ============================================================================
# POINTWISE SUITE
# ============================================================================

class Relu(Function):
    def forward(self, x):
        self.saved = x > 0
        return np.where(self.saved, x, 0.0)

    def backward(self, g):
        return (g * self.saved,)


class Sigmoid(Function):
    def forward(self, x):
        info = np.finfo(storage_dtype())
        # strictly inside (0, 1) after rounding to storage precision
        s = np.clip(0.5 * (1.0 + np.tanh(0.5 * x)), info.tiny, 1.0 - info.eps)
        self.saved = s
        return s

    def backward(self, g):
        s = self.saved
        return (g * s * (1.0 - s),)


class Tanh(Function):
    def forward(self, x):
        self.saved = np.tanh(x)
        return self.saved

    def backward(self, g):
        return (g * (1.0 - self.saved ** 2),)


class Mul(Function):
    def forward(self, x, y):
        self.saved = (x, y)
        return x * y

    def backward(self, g):
        x, y = self.saved
        return g * y, g * x


class Add(Function):
    def forward(self, x, y):
        return x + y

    def backward(self, g):
        return g, g


class Scale(Function):
    def forward(self, x, a=1.0):
        self.saved = a
        return x * a

    def backward(self, g):
        return (g * self.saved,)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic sigmoid; outputs lie strictly in (0, 1)."""
    return Sigmoid.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def mul(x: Tensor, y: Tensor) -> Tensor:
    _require_same_dims("mul", x, y)
    return Mul.apply(x, y)


def add(x: Tensor, y: Tensor) -> Tensor:
    _require_same_dims("add", x, y)
    return Add.apply(x, y)


def scale(x: Tensor, a: float) -> Tensor:
    return Scale.apply(x, a=float(a))


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no gradient path."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.grad = None
    out.requires_grad = False
    out.name = x.name
    out._ctx = None
    out._seq = next(_creation)
    out._released = False
    return out


# ============================================================================
# REDUCTIONS
# ============================================================================

class GlobalAvgPool2d(Function):
    def forward(self, x):
        self.saved = x.shape
        return x.mean(axis=(-2, -1))

    def backward(self, g):
        shape = self.saved
        area = shape[-1] * shape[-2]
        return (np.broadcast_to((g / area)[..., None, None], shape).copy(),)


class MaxPool1d(Function):
    def forward(self, x):
        steps = x.shape[0] // 2
        pairs = x[:2 * steps].reshape((steps, 2) + x.shape[1:])
        choice = np.argmax(pairs, axis=1)
        self.saved = (x.shape, choice)
        return np.take_along_axis(pairs, choice[:, None], axis=1)[:, 0]

    def backward(self, g):
        shape, choice = self.saved
        steps = choice.shape[0]
        pairs = np.zeros((steps, 2) + shape[1:], dtype=ACCUM)
        np.put_along_axis(pairs, choice[:, None], g[:, None], axis=1)
        gx = np.zeros(shape, dtype=ACCUM)
        gx[:2 * steps] = pairs.reshape((2 * steps,) + shape[1:])
        return (gx,)


class Mean(Function):
    def forward(self, x):
        self.saved = x.shape
        return np.asarray(x.mean())

    def backward(self, g):
        shape = self.saved
        return (np.full(shape, g / int(np.prod(shape)), dtype=ACCUM),)


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.saved = (out, axis)
        return out

    def backward(self, g):
        out, axis = self.saved
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


class MSE(Function):
    def forward(self, y, y_student):
        diff = y - y_student
        self.saved = diff
        return np.asarray(np.sum(diff * diff) / diff.size)

    def backward(self, g):
        diff = self.saved
        gy = g * 2.0 * diff / diff.size
        return gy, -gy


class KLDivergence(Function):
    def forward(self, p_log, q_log):
        p = np.exp(p_log)
        self.saved = (p, p_log, q_log)
        return np.asarray(np.sum(p * (p_log - q_log)) / p_log.shape[0])

    def backward(self, g):
        p, p_log, q_log = self.saved
        rows = p_log.shape[0]
        return g * p * (p_log - q_log + 1.0) / rows, -g * p / rows


def global_avg_pool_2d(x: Tensor) -> Tensor:
    """Mean over the two trailing (spatial) axes: [C, H, W] -> [C], [N, C, H, W] -> [N, C]."""
    if x.data.ndim < 2 or x.shape[-1] * x.shape[-2] == 0:
        raise ShapeError(f"global_avg_pool_2d: empty spatial extent in {list(x.shape)}")
    return GlobalAvgPool2d.apply(x)


def max_pool_1d(x: Tensor) -> Tensor:
    """Kernel 2, stride 2 max pooling along axis 0; a trailing odd step is dropped."""
    if x.data.ndim < 1 or x.shape[0] < 2:
        raise ShapeError(f"max_pool_1d: need at least 2 steps along axis 0, got {list(x.shape)}")
    return MaxPool1d.apply(x)


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean: empty tensor")
    return Mean.apply(x)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax: empty axis {axis} in {list(x.shape)}")
    return LogSoftmax.apply(x, axis=axis)


def mse(y: Tensor, y_student: Tensor) -> Tensor:
    """sum_i (y_i - y'_i)^2 / n over all n elements; y is the teacher side."""
    _require_same_dims("mse", y, y_student)
    if y.size == 0:
        raise ShapeError("mse: empty tensors")
    return MSE.apply(y, y_student)


def kl_divergence(p_log: Tensor, q_log: Tensor) -> Tensor:
    """Row-averaged KL(p || q) of [steps, classes] log-distributions."""
    _require_same_dims("kl_divergence", p_log, q_log)
    if p_log.data.ndim != 2 or p_log.shape[0] == 0:
        raise ShapeError(f"kl_divergence: expected [steps, classes], got {list(p_log.shape)}")
    return KLDivergence.apply(p_log, q_log)


# ============================================================================
# SHAPE OPS
# ============================================================================

class Reshape(Function):
    def forward(self, x, dims=()):
        self.saved = x.shape
        return x.reshape(dims)

    def backward(self, g):
        return (g.reshape(self.saved),)


class Permute(Function):
    def forward(self, x, axes=()):
        self.saved = np.argsort(axes)
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, g):
        return (g.transpose(self.saved),)


class Concat(Function):
    def forward(self, *xs, axis=-1):
        self.saved = (axis, np.cumsum([x.shape[axis] for x in xs])[:-1])
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        axis, cuts = self.saved
        return np.split(g, cuts, axis=axis)


class Stack(Function):
    def forward(self, *xs):
        return np.stack(xs, axis=0)

    def backward(self, g):
        return [g[i] for i in range(g.shape[0])]


class SliceAxis(Function):
    def forward(self, x, axis=0, start=0, stop=None):
        self.saved = (x.shape, axis, start, stop)
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        return x[tuple(index)]

    def backward(self, g):
        shape, axis, start, stop = self.saved
        gx = np.zeros(shape, dtype=ACCUM)
        index = [slice(None)] * len(shape)
        index[axis] = slice(start, stop)
        gx[tuple(index)] = g
        return (gx,)


class Index(Function):
    def forward(self, x, i=0):
        self.saved = (x.shape, i)
        return x[i]

    def backward(self, g):
        shape, i = self.saved
        gx = np.zeros(shape, dtype=ACCUM)
        gx[i] = g
        return (gx,)


class Flip(Function):
    def forward(self, x):
        return x[::-1].copy()

    def backward(self, g):
        return (g[::-1].copy(),)


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != x.size:
        raise ShapeError(f"reshape: {list(x.shape)} cannot become {list(dims)}")
    return Reshape.apply(x, dims=dims)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute: {list(axes)} is not a permutation of {x.data.ndim} axes")
    return Permute.apply(x, axes=axes)


def concat(xs: List[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for k, (a, b) in enumerate(zip(ref, other))
                                         if k != axis % len(ref)):
            raise ShapeError(f"concat: dims {ref} and {other} differ off axis {axis}")
    return Concat.apply(*xs, axis=axis)


def stack(xs: List[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("stack: nothing to stack")
    _require_same_dims("stack", *xs)
    return Stack.apply(*xs)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice_axis: [{start}:{stop}] outside axis {axis} of {list(x.shape)}")
    return SliceAxis.apply(x, axis=axis, start=start, stop=stop)


def index(x: Tensor, i: int) -> Tensor:
    """x[i] along axis 0."""
    if not 0 <= i < x.shape[0]:
        raise ShapeError(f"index: {i} outside axis 0 of {list(x.shape)}")
    return Index.apply(x, i=i)


def flip(x: Tensor) -> Tensor:
    """Reverse axis 0."""
    return Flip.apply(x)
