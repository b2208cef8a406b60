"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

A feature map is an ordinary rank-3 ``Tensor`` (channels x height x width);
shape metadata is the numpy shape, so it can never disagree with storage.
Operations executed while a :class:`Tape` is active are recorded in execution
order; replaying the records backwards propagates gradients to every reachable
input exactly once.  Without an active tape the same functions are plain numpy
computations, which is what inference and label-generation passes use.

Everything is float64.  Kernels are vectorised numpy with fixed reduction
order, so repeated runs are bit-identical.
"""

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested operation."""


class Tensor:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # arithmetic sugar; the actual recording lives in the module functions
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

    def __abs__(self):
        return absolute(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)


class Parameter(Tensor):
    """Learnable tensor: persistent gradient buffer plus a stable name."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(np.array(data, dtype=np.float64))
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


_ACTIVE_TAPE = None


class Tape:
    """Execution-ordered record of differentiable operations.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the scalar loss.  Forward execution order is a
    topological order of the data-flow graph, so the reversed record list is
    a valid backward schedule.
    """

    def __init__(self):
        self._records = []  # (out, parents, backward_fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        """Populate gradients of every tensor reachable from ``loss``."""
        if not isinstance(loss, Tensor):
            raise TypeError("backward target must be a Tensor")
        if loss.data.ndim != 0:
            raise ShapeError(
                f"backward target must be a scalar, got shape {loss.data.shape}"
            )
        # transient grads from a previous replay must not leak into this one
        for out, parents, _ in self._records:
            if not isinstance(out, Parameter):
                out.grad = None
            for p in parents:
                if not isinstance(p, Parameter):
                    p.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for out, _, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            backward_fn(out.grad)


def backward(tape, loss):
    """Replay ``tape`` in reverse from the scalar ``loss`` node."""
    tape.backward(loss)


def _record(out, parents, backward_fn):
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._records.append((out, parents, backward_fn))
    return out


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * out.data / b.data, b.data.shape))

    return _record(out, (a, b), bw)


def absolute(a):
    # L1 subgradient at 0 is fixed to 0 (np.sign(0) == 0) for determinism
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))

    def bw(g):
        _accumulate(a, g * np.sign(a.data))

    return _record(out, (a,), bw)


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def bw(g):
        _accumulate(a, g * (a.data > 0.0))

    return _record(out, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    e = np.exp(-np.abs(a.data))
    s = np.where(a.data >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(s)

    def bw(g):
        _accumulate(a, g * s * (1.0 - s))

    return _record(out, (a,), bw)


def softplus(a):
    """log(1 + exp(x)), computed overflow-free; strictly positive output."""
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data))))
    e = np.exp(-np.abs(a.data))
    sig = np.where(a.data >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        _accumulate(a, g * sig)

    return _record(out, (a,), bw)


def softmax(a, axis=-1):
    """Stable softmax along ``axis``; slices sum to 1 and shift-invariance
    holds because the per-slice max is subtracted before exponentiation."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(s)

    def bw(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        _accumulate(a, s * (g - dot))

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions / shaping


def sum_all(a):
    a = as_tensor(a)
    out = Tensor(np.sum(a.data))

    def bw(g):
        _accumulate(a, np.full(a.data.shape, float(g)))

    return _record(out, (a,), bw)


def mean_all(a):
    a = as_tensor(a)
    n = a.data.size
    out = Tensor(np.mean(a.data))

    def bw(g):
        _accumulate(a, np.full(a.data.shape, float(g) / n))

    return _record(out, (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    src = a.data.shape

    def bw(g):
        _accumulate(a, g.reshape(src))

    return _record(out, (a,), bw)


def transpose2d(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy())

    def bw(g):
        _accumulate(a, g.T)

    return _record(out, (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul expects matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _record(out, (a, b), bw)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ShapeError("concat operands must share rank")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(
                    f"concat mismatch on axis {ax}: "
                    f"{t.shape} vs {tensors[0].shape}"
                )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        start = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * ndim
            idx[axis] = slice(start, start + size)
            _accumulate(t, g[tuple(idx)])
            start += size

    return _record(out, tuple(tensors), bw)


def concat_channels(tensors):
    """Stack feature maps along the channel axis; H and W must match."""
    for t in tensors:
        if as_tensor(t).ndim != 3:
            raise ShapeError("concat_channels expects rank-3 feature maps")
    return concat(tensors, axis=0)


def spatial_slice(a, rows, cols):
    """View ``a[:, rows, cols]`` of a feature map as a differentiable crop."""
    a = as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"spatial_slice expects a rank-3 map, got {a.shape}")
    r0, r1 = rows
    c0, c1 = cols
    out = Tensor(a.data[:, r0:r1, c0:c1].copy())
    src = a.data.shape

    def bw(g):
        full = np.zeros(src)
        full[:, r0:r1, c0:c1] = g
        _accumulate(a, full)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# spatial kernels


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of a C_in x H x W map with C_out kernels.

    ``weight`` has shape (C_out, C_in, k, k); zero padding; no kernel flip.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be C x H x W, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(
            f"conv2d weight must be (C_out, C_in, k, k), got {weight.shape}"
        )
    c_in, h, w = x.shape
    c_out, c_in_w, k, _ = weight.shape
    if c_in_w != c_in:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c_in} channels, "
            f"weight expects {c_in_w}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(
            f"conv2d bias must have shape ({c_out},), got {bias.shape}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad conv2d stride/padding: {stride}/{padding}")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h + 2 * padding < k or h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {h}x{w}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )

    def _cols(xp):
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        return win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, h_out * w_out)

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    w_mat = weight.data.reshape(c_out, -1)
    y = w_mat @ _cols(xp)
    if bias is not None:
        y = y + bias.data[:, None]
    out = Tensor(y.reshape(c_out, h_out, w_out))

    def bw(g):
        g_mat = g.reshape(c_out, -1)
        _accumulate(weight, (g_mat @ _cols(xp).T).reshape(weight.data.shape))
        if bias is not None:
            _accumulate(bias, g_mat.sum(axis=1))
        g_cols = (w_mat.T @ g_mat).reshape(c_in, k, k, h_out, w_out)
        gxp = np.zeros(xp.shape)
        for di in range(k):
            for dj in range(k):
                gxp[
                    :,
                    di : di + stride * h_out : stride,
                    dj : dj + stride * w_out : stride,
                ] += g_cols[:, di, dj]
        if padding:
            gxp = gxp[:, padding : padding + h, padding : padding + w]
        _accumulate(x, gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, bw)


def maxpool2(x):
    """2x2 max pooling with stride 2; gradient goes to the first (row-major)
    maximal element of each window."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2 input must be C x H x W, got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (
        x.data.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    )
    arg = np.argmax(windows, axis=-1)  # first occurrence on ties
    out = Tensor(np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0])

    def bw(g):
        gw = np.zeros((c, h2, w2, 4))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        _accumulate(
            x, gw.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        )

    return _record(out, (x,), bw)


@lru_cache(maxsize=None)
def _interp_matrix(n_in):
    """Row-interpolation matrix for x2 bilinear upsampling (half-pixel
    centres, corners not aligned)."""
    n_out = 2 * n_in
    src = np.clip((np.arange(n_out) + 0.5) / 2.0 - 0.5, 0.0, n_in - 1.0)
    i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), i0] += 1.0 - t
    mat[np.arange(n_out), i1] += t
    mat.setflags(write=False)
    return mat


def upsample2(x):
    """Bilinear x2 upsampling of a C x H x W map."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample2 input must be C x H x W, got {x.shape}")
    _, h, w = x.shape
    ah = _interp_matrix(h)
    aw = _interp_matrix(w)
    out = Tensor(np.matmul(np.matmul(ah, x.data), aw.T))

    def bw(g):
        _accumulate(x, np.matmul(np.matmul(ah.T, g), aw))

    return _record(out, (x,), bw)
