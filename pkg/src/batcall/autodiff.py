"""Dense tensors with reverse-mode automatic differentiation.

Operations executed inside an active :class:`Graph` are appended to that
graph's tape; :func:`backward` walks the tape in reverse insertion order.
Outside a graph every operation is a plain numpy computation, which is what
inference uses.

Image-like tensors follow the ``(batch, channels, height, width)`` layout.
"""

from __future__ import annotations

import threading
import weakref
from typing import Callable, Sequence

import numpy as np

from . import _kernels as _k

__all__ = [
    "ShapeError",
    "GradientError",
    "Graph",
    "Tensor",
    "active_graph",
    "no_record",
    "apply_op",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "slice",
    "take",
    "scatter",
    "relu",
    "sigmoid",
    "softmax",
    "layernorm",
    "conv2d",
    "batchnorm2d",
    "maxpool2d",
    "relu_maxpool2d",
    "adaptive_avgpool2d",
    "numerical_grad",
    "max_relative_error",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class GradientError(RuntimeError):
    """Backward pass was requested on something that cannot be differentiated."""


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Graph:
    """Append-only tape of recorded operations.

    Use as a context manager; graphs are thread-local so concurrent callers
    each need their own instance.  Tensors refer to their graph weakly, so
    :func:`backward` must run while the graph is still alive (inside the
    ``with`` block, or while a reference to it is held).
    """

    __slots__ = ("nodes", "__weakref__")

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


class no_record:
    """Suspend recording inside an active graph."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


def active_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("kind", "inputs", "out", "backward")

    def __init__(self, kind, inputs, out, backward):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tensor:
    """n-dimensional array that may take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node", "retain", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.retain = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this intermediate after backward."""
        self.retain = True
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def apply_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, kind: str) -> Tensor:
    """Wrap ``data`` as the output of an operation and record it if needed.

    ``backward`` maps the output gradient to a tuple with one entry per input
    (``None`` where no gradient is produced).
    """
    out = Tensor(data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = (weakref.ref(graph), len(graph.nodes))
        graph.nodes.append(Node(kind, tuple(inputs), out, backward))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise GradientError("loss was not recorded in a graph")
    graph = loss.node[0]()
    if graph is None:
        raise GradientError("the graph that recorded the loss no longer exists")
    if not graph.nodes:
        raise GradientError("graph is empty")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        if node.out.retain:
            node.out.grad = g if node.out.grad is None else node.out.grad + g
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                if t.grad is None:
                    t.grad = np.array(gi, dtype=t.data.dtype).reshape(t.shape)
                else:
                    t.grad += gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(a.data * b.data, (a, b), bwd, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return apply_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return apply_op(x.data * pos, (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype, copy=False)
    return apply_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return apply_op(np.asarray(out), (x,), bwd, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.size // max(np.asarray(out).size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)

    return apply_op(np.asarray(out, dtype=x.dtype), (x,), bwd, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return apply_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return apply_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op(out, tensors, bwd, "concat")


def slice(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    out = x.data[index]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return apply_op(np.array(out), (x,), bwd, "slice")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, indices, axis=axis)

    def bwd(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return apply_op(out, (x,), bwd, "take")


def scatter(x: Tensor, indices, size: int, axis: int = 0) -> Tensor:
    """Place slices of ``x`` at ``indices`` of a zero tensor of length ``size`` along ``axis``."""
    indices = np.asarray(indices, dtype=np.intp)
    shape = list(x.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=x.dtype)
    np.moveaxis(out, axis, 0)[indices] = np.moveaxis(x.data, axis, 0)

    def bwd(g):
        return (np.take(g, indices, axis=axis),)

    return apply_op(out, (x,), bwd, "scatter")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op(out, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w + bias`` over the last axis of ``x``; ``w`` is ``(in, out)``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def bwd(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return apply_op(out, inputs, bwd, "linear")


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return apply_op(s, (x,), bwd, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: feature size {d} vs gamma {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        gg = np.sum(g * xhat, axis=lead) if gamma.requires_grad else None
        gb = np.sum(g, axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return apply_op(out.astype(x.dtype, copy=False), (x, gamma, beta), bwd, "layernorm")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalisation over ``(batch, height, width)``.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential averaging with
    ``momentum``).  In eval mode the running buffers are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} channels vs gamma {gamma.shape}")
    m = n * h * w
    y3 = np.ascontiguousarray(x.data).reshape(n, c, h * w)
    if training:
        if m == 1:
            raise ValueError("batchnorm2d: a single value per channel has no variance")
        mu, var = _k.channel_moments(y3)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    a = gamma.data * inv
    shift = beta.data - mu * a
    out = _k.channel_affine(y3, a.astype(x.dtype), shift.astype(x.dtype)).reshape(x.shape)

    def bwd(g):
        g3 = np.ascontiguousarray(g).reshape(n, c, h * w)
        if training:
            gx, gg, gb = _k.batchnorm_backward(g3, y3, mu, inv, gamma.data.astype(np.float64), x.requires_grad)
            return (gx.reshape(x.shape) if x.requires_grad else None), gg, gb
        xhat = (y3 - mu.astype(x.dtype)[None, :, None]) * inv.astype(x.dtype)[None, :, None]
        gg = np.sum(g3 * xhat, axis=(0, 2)).astype(x.dtype)
        gb = g3.sum(axis=(0, 2)).astype(x.dtype)
        gx = g * a.astype(x.dtype)[None, :, None, None] if x.requires_grad else None
        return gx, gg, gb

    return apply_op(out, (x, gamma, beta), bwd, "batchnorm2d")


# ---------------------------------------------------------------- convolution / pooling


def _pad_channels(a: np.ndarray, axis: int) -> np.ndarray:
    """Zero-pad ``axis`` up to a multiple of 4 (the kernels' channel block)."""
    extra = -a.shape[axis] % 4
    if extra:
        pad = [(0, 0)] * a.ndim
        pad[axis] = (0, extra)
        a = np.pad(a, pad)
    return np.ascontiguousarray(a)


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero padding."""
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {k.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = k.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {o} output channels")
    p = int(padding)
    if h + 2 * p < kh or w + 2 * p < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xd = np.ascontiguousarray(x.data)
    kd = _pad_channels(np.asarray(k.data, dtype=x.dtype), 0)
    bd = np.zeros(len(kd), x.dtype)
    if bias is not None:
        bd[:o] = bias.data
    out = _k.conv2d_forward(xd, kd, bd, p, p)[:, :o]

    def bwd(g):
        g = _pad_channels(g, 1)
        gk, gb = _k.conv2d_grad_weight(xd, g, kh, kw, p, p)
        gk = gk[:o].astype(x.dtype)
        gx = None
        if x.requires_grad:
            # the input gradient is a full correlation with the flipped kernel,
            # cropped back to the unpadded input
            flipped = _pad_channels(kd[:o, :, ::-1, ::-1].transpose(1, 0, 2, 3), 0)
            qh, qw = kh - 1 - p, kw - 1 - p
            zero = np.zeros(len(flipped), x.dtype)
            if qh >= 0 and qw >= 0:
                gx = _k.conv2d_forward(g, flipped, zero, qh, qw)[:, :c]
            else:
                full = _k.conv2d_forward(g, flipped, zero, kh - 1, kw - 1)
                gx = full[:, :c, p : p + h, p : p + w]
        return (gx, gk) if bias is None else (gx, gk, gb[:o].astype(x.dtype))

    inputs = (x, k) if bias is None else (x, k, bias)
    return apply_op(out, inputs, bwd, "conv2d")


def _pool(x: Tensor, relu: bool, kind: str) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"{kind} expects NCHW input, got {x.shape}")
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"{kind}: input {x.shape[2]}x{x.shape[3]} too small")
    out, idx = _k.maxpool2_forward(np.ascontiguousarray(x.data), relu)

    def bwd(g):
        return (_k.maxpool2_backward(np.ascontiguousarray(g), idx, out, x.shape, relu),)

    return apply_op(out, (x,), bwd, kind)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    return _pool(x, False, "maxpool2d")


def relu_maxpool2d(x: Tensor) -> Tensor:
    """``maxpool2d(relu(x))`` in one pass."""
    return _pool(x, True, "relu_maxpool2d")


def _adaptive_bounds(size: int, bins: int) -> list[tuple[int, int]]:
    return [((i * size) // bins, -((-(i + 1) * size) // bins)) for i in range(bins)]


def adaptive_avgpool2d(x: Tensor, output_size: tuple[int, int]) -> Tensor:
    """Average over ``output_size`` bins; bin ``i`` spans ``[floor(i*H/oh), ceil((i+1)*H/oh))``."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avgpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = output_size
    if h < oh or w < ow:
        raise ShapeError(f"adaptive_avgpool2d: input {h}x{w} smaller than output {oh}x{ow}")
    rows, cols = _adaptive_bounds(h, oh), _adaptive_bounds(w, ow)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bwd(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / ((r1 - r0) * (c1 - c0)))[:, :, None, None]
        return (gx,)

    return apply_op(out, (x,), bwd, "adaptive_avgpool2d")


# ---------------------------------------------------------------- gradient checking


def numerical_grad(fn: Callable[[], float], tensor: Tensor, step: float = 1e-3, indices=None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``tensor``.

    ``fn`` is re-evaluated after each in-place perturbation; results are
    accumulated in float64.  Only ``indices`` (flat) are probed when given,
    the remaining entries are returned as NaN.
    """
    flat = tensor.data.reshape(-1)
    out = np.full(flat.size, np.nan)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn())
        flat[i] = orig - step
        down = float(fn())
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(tensor.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / (|n| + 1e-8) over the finite entries of ``numeric``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    ok = np.isfinite(numeric)
    if not ok.any():
        return 0.0
    err = np.abs(analytic[ok] - numeric[ok]) / (np.abs(numeric[ok]) + 1e-8)
    return float(err.max())
