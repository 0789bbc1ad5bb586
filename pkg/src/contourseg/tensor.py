"""Dense N-d tensors with a recorded forward tape and exact reverse-mode gradients.

Activations use the canonical N x C x H x W layout. Operations executed
while a :class:`Graph` is active append a backward closure to its tape;
:func:`backward` replays the tape in reverse, which visits every node
exactly once in valid topological order because consumers are always
recorded after their producers.

Tensors are immutable once produced by an op, except for gradient
accumulation. A Graph belongs to a single forward/backward cycle and
must not be shared between threads; distinct graphs may run concurrently.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import _kernels


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """A dense array of real values plus an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"

    # arithmetic; the second operand may be a Tensor, scalar or ndarray
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, _neg_const(other) if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / np.asarray(other, dtype=self.data.dtype))

    def __rtruediv__(self, other):
        return div(_const_tensor(other, self.data.dtype), self)


def _not_scalar(t):
    raise ValueError(f"item() requires a single-element tensor, got shape {tuple(t.shape)}")


def _neg_const(c):
    return -np.asarray(c)


def _const_tensor(c, dtype):
    return Tensor(np.asarray(c, dtype=dtype))


@dataclass
class LayerParams:
    """Convolution parameters: weights (OutC x InC x KH x KW) and bias (OutC)."""

    weights: Tensor
    bias: Tensor

    def __post_init__(self):
        w, b = self.weights, self.bias
        if w.ndim != 4:
            raise ShapeMismatchError(f"conv weights must be 4-d, got shape {tuple(w.shape)}")
        kh, kw = w.shape[2], w.shape[3]
        if kh % 2 == 0 or kw % 2 == 0 or kh < 1 or kw < 1:
            raise ValueError(f"kernel spatial dims must be odd and >= 1, got {kh}x{kw}")
        if b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ShapeMismatchError(
                f"bias shape {tuple(b.shape)} does not match {w.shape[0]} output channels"
            )


_active = threading.local()


def _graph_stack():
    stack = getattr(_active, "stack", None)
    if stack is None:
        stack = []
        _active.stack = stack
    return stack


def _current_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Ordered tape of executed primitives for one forward pass.

    Use as a context manager; ops run inside the block are recorded.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _graph_stack().pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, name, out, fn):
        self._nodes.append((name, out, fn))

    def first_nonfinite(self):
        """Name and index of the earliest recorded output with a NaN/Inf, or None."""
        for idx, (name, out, _) in enumerate(self._nodes):
            if not np.all(np.isfinite(out.data)):
                return f"{name} (node {idx}, shape {tuple(out.shape)})"
        return None


def _record(name, out, fn):
    g = _current_graph()
    if g is not None:
        g._record(name, out, fn)


def _accumulate(t: Tensor, delta) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += delta


def backward(graph: Graph, root: Tensor) -> None:
    """Populate gradients of everything recorded on `graph` from a scalar root.

    Gradients of op outputs are consumed as the tape unwinds; leaf tensors
    (parameters and inputs) keep theirs, and repeated calls accumulate
    into those buffers.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {tuple(root.shape)}")
    _accumulate(root, np.ones_like(root.data))
    for _, out, fn in reversed(graph._nodes):
        if out.grad is not None:
            fn(out.grad)
            out.grad = None


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    b_t = b if isinstance(b, Tensor) else None
    b_data = b.data if b_t is not None else np.asarray(b, dtype=a.data.dtype)
    out = Tensor(a.data + b_data)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        if b_t is not None:
            _accumulate(b_t, _unbroadcast(g, b_t.shape))

    _record("add", out, bwd)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _record("neg", out, lambda g: _accumulate(a, -g))
    return out


def mul(a: Tensor, b) -> Tensor:
    b_t = b if isinstance(b, Tensor) else None
    b_data = b.data if b_t is not None else np.asarray(b, dtype=a.data.dtype)
    out = Tensor(a.data * b_data)

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b_data, a.shape))
        if b_t is not None:
            _accumulate(b_t, _unbroadcast(g * a.data, b_t.shape))

    _record("mul", out, bwd)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    _record("div", out, bwd)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    _record("log", out, lambda g: _accumulate(a, g / a.data))
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))

    def bwd(g):
        _accumulate(a, g / (2.0 * out.data))

    _record("sqrt", out, bwd)
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside the range."""
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g):
        _accumulate(a, g * mask)

    _record("clip", out, bwd)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0

    def bwd(g):
        _accumulate(a, g * mask)

    _record("relu", out, bwd)
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, evaluated stably for large |x|."""
    x = a.data
    z = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = Tensor(out_data)

    def bwd(g):
        _accumulate(a, g * out.data * (1.0 - out.data))

    _record("sigmoid", out, bwd)
    return out


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(a.data.sum()))

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    _record("total", out, bwd)
    return out


def mean(a: Tensor, axes, keepdims: bool = True) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    count = 1
    for ax in axes:
        count *= a.shape[ax]

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(gk / count, a.shape).copy())

    _record("mean", out, bwd)
    return out


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x: Tensor, p: LayerParams, stride: int = 1, padding="same") -> Tensor:
    """2-d cross-correlation with bias over an N x C x H x W input.

    `padding` is "same" (zero padding preserving spatial dims at stride 1)
    or an explicit non-negative int applied on all four sides.
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"conv2d input must be 4-d, got shape {tuple(x.shape)}")
    w, b = p.weights, p.bias
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(
            f"input has {x.shape[1]} channels but kernel of shape "
            f"{tuple(w.shape)} expects {w.shape[1]}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    kh, kw = w.shape[2], w.shape[3]
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    else:
        ph = pw = int(padding)
        if ph < 0:
            raise ValueError(f"padding must be >= 0, got {padding}")
    out_h = (x.shape[2] + 2 * ph - kh) // stride + 1
    out_w = (x.shape[3] + 2 * pw - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(
            f"conv2d output would be {out_h}x{out_w} for input {tuple(x.shape)} "
            f"and kernel {tuple(w.shape)}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = Tensor(_kernels.conv2d_forward(xp, w.data, b.data, stride))

    def bwd(g):
        g = np.ascontiguousarray(g)
        _accumulate(b, g.sum(axis=(0, 2, 3)))
        _accumulate(w, _kernels.conv2d_weight_grad(g, xp, kh, kw, stride))
        dxp = _kernels.conv2d_input_grad(g, w.data, stride, xp.shape[2], xp.shape[3])
        h, wd = x.shape[2], x.shape[3]
        _accumulate(x, dxp[:, :, ph : ph + h, pw : pw + wd])

    _record("conv2d", out, bwd)
    return out


def _pool_bounds(in_dim: int, out_dim: int):
    idx = np.arange(out_dim + 1)
    return (idx * in_dim) // out_dim


def _check_pool_args(x, out_h, out_w):
    if x.ndim != 4:
        raise ShapeMismatchError(f"pooling input must be 4-d, got shape {tuple(x.shape)}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"pooling output dims must be >= 1, got {out_h}x{out_w}")
    if out_h > x.shape[2] or out_w > x.shape[3]:
        raise ShapeMismatchError(
            f"pooling output {out_h}x{out_w} exceeds input {x.shape[2]}x{x.shape[3]}"
        )


def maxpool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive max pooling over a near-equal partition of the input grid.

    Gradient routes to the first maximal element of each window in
    row-major order.
    """
    _check_pool_args(x, out_h, out_w)
    n, c, h, w = x.shape
    if h % out_h == 0 and w % out_w == 0:
        fh, fw = h // out_h, w // out_w
        win = (
            x.data.reshape(n, c, out_h, fh, out_w, fw)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, out_h, out_w, fh * fw)
        )
        idx = win.argmax(axis=-1)
        out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

        def bwd(g):
            dwin = np.zeros_like(win)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = (
                dwin.reshape(n, c, out_h, out_w, fh, fw)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
            _accumulate(x, dx)

        _record("maxpool2d", out, bwd)
        return out

    rb, cb = _pool_bounds(h, out_h), _pool_bounds(w, out_w)
    out_data = np.empty((n, c, out_h, out_w), x.data.dtype)
    arg = np.empty((n, c, out_h, out_w), np.int64)
    for i in range(out_h):
        for j in range(out_w):
            block = x.data[:, :, rb[i] : rb[i + 1], cb[j] : cb[j + 1]]
            flat = block.reshape(n, c, -1)
            a = flat.argmax(axis=-1)
            arg[:, :, i, j] = a
            out_data[:, :, i, j] = np.take_along_axis(flat, a[..., None], axis=-1)[..., 0]
    out = Tensor(out_data)

    def bwd(g):
        dx = np.zeros_like(x.data)
        for i in range(out_h):
            for j in range(out_w):
                bw = cb[j + 1] - cb[j]
                a = arg[:, :, i, j]
                rows = rb[i] + a // bw
                cols = cb[j] + a % bw
                ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
                np.add.at(dx, (ni, ci, rows, cols), g[:, :, i, j])
        _accumulate(x, dx)

    _record("maxpool2d", out, bwd)
    return out


def avgpool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive mean pooling; gradient spreads uniformly over each window."""
    _check_pool_args(x, out_h, out_w)
    n, c, h, w = x.shape
    if h % out_h == 0 and w % out_w == 0:
        fh, fw = h // out_h, w // out_w
        out = Tensor(x.data.reshape(n, c, out_h, fh, out_w, fw).mean(axis=(3, 5)))

        def bwd(g):
            dx = np.broadcast_to(
                g[:, :, :, None, :, None] / (fh * fw), (n, c, out_h, fh, out_w, fw)
            ).reshape(n, c, h, w)
            _accumulate(x, dx)

        _record("avgpool2d", out, bwd)
        return out

    rb, cb = _pool_bounds(h, out_h), _pool_bounds(w, out_w)
    out_data = np.empty((n, c, out_h, out_w), x.data.dtype)
    for i in range(out_h):
        for j in range(out_w):
            out_data[:, :, i, j] = x.data[:, :, rb[i] : rb[i + 1], cb[j] : cb[j + 1]].mean(
                axis=(2, 3)
            )
    out = Tensor(out_data)

    def bwd(g):
        dx = np.zeros_like(x.data)
        for i in range(out_h):
            for j in range(out_w):
                area = (rb[i + 1] - rb[i]) * (cb[j + 1] - cb[j])
                dx[:, :, rb[i] : rb[i + 1], cb[j] : cb[j + 1]] += (
                    g[:, :, i : i + 1, j : j + 1] / area
                )
        _accumulate(x, dx)

    _record("avgpool2d", out, bwd)
    return out


_interp_cache: dict = {}


def bilinear_matrix(in_dim: int, out_dim: int, dtype=np.float64) -> np.ndarray:
    """Row-interpolation matrix M (out_dim x in_dim) for bilinear resampling.

    Sample centers follow the half-pixel convention: source coordinate
    (i + 0.5) * in/out - 0.5, clamped to the valid range. Resampling a
    vector v is M @ v; the exact adjoint is M.T.
    """
    key = (in_dim, out_dim, np.dtype(dtype).str)
    cached = _interp_cache.get(key)
    if cached is not None:
        return cached
    m = np.zeros((out_dim, in_dim), dtype=dtype)
    scale = in_dim / out_dim
    for o in range(out_dim):
        s = (o + 0.5) * scale - 0.5
        s = min(max(s, 0.0), in_dim - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, in_dim - 1)
        t = s - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    _interp_cache[key] = m
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling to (out_h, out_w); exact transpose in backward."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"upsample input must be 4-d, got shape {tuple(x.shape)}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"upsample output dims must be >= 1, got {out_h}x{out_w}")
    r = bilinear_matrix(x.shape[2], out_h, x.data.dtype)
    c = bilinear_matrix(x.shape[3], out_w, x.data.dtype)
    out = Tensor(np.einsum("ri,ncij,sj->ncrs", r, x.data, c, optimize=True))

    def bwd(g):
        _accumulate(x, np.einsum("ri,ncrs,sj->ncij", r, g, c, optimize=True))

    _record("upsample_bilinear", out, bwd)
    return out


def concat_channels(xs) -> Tensor:
    """Stack tensors along the channel axis; inputs must share N, H and W."""
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels requires at least one input")
    base = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeMismatchError(
                f"concat_channels inputs disagree: {tuple(base)} vs {tuple(t.shape)}"
            )
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    offsets = np.cumsum([0] + [t.shape[1] for t in xs])

    def bwd(g):
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            _accumulate(t, g[:, lo:hi])

    _record("concat_channels", out, bwd)
    return out
