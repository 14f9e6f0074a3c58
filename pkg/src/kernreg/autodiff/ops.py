"""Primitive operations.

Linear operations come in adjoint pairs (conv2d and its two transposes,
avg-pool and its upsampling, max-gather and max-scatter, sum and
broadcast) so that every vjp is expressed with ops from this module and can
be differentiated again.  Piecewise-constant quantities (ReLU masks, signs,
argmax patterns) are ops with no gradient, recomputed from their inputs on
replay.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from kernreg.autodiff.tensor import Op, ShapeError, Tensor, apply, as_tensor


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------------------
# broadcasting helpers


def _sum_to_shape(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"cannot reduce shape {a.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    out = a.sum(axis=axes, keepdims=True) if axes else a
    return out.reshape(shape)


class SumTo(Op):
    name = "sum_to"

    @staticmethod
    def forward(a, shape):
        return _sum_to_shape(a, tuple(shape))

    @staticmethod
    def vjp(g, out, inputs, shape):
        return (broadcast_to(g, inputs[0].shape),)


class BroadcastTo(Op):
    name = "broadcast_to"

    @staticmethod
    def forward(a, shape):
        return np.broadcast_to(a, tuple(shape)).copy()

    @staticmethod
    def vjp(g, out, inputs, shape):
        return (sum_to(g, inputs[0].shape),)


def sum_to(x, shape) -> Tensor:
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    return apply(SumTo, x, shape=tuple(shape))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    return apply(BroadcastTo, x, shape=tuple(shape))


# ---------------------------------------------------------------------------
# elementwise arithmetic


class Add(Op):
    name = "add"

    @staticmethod
    def forward(a, b):
        return a + b

    @staticmethod
    def vjp(g, out, inputs):
        a, b = inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Sub(Op):
    name = "sub"

    @staticmethod
    def forward(a, b):
        return a - b

    @staticmethod
    def vjp(g, out, inputs):
        a, b = inputs
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)


class Mul(Op):
    name = "mul"

    @staticmethod
    def forward(a, b):
        return a * b

    @staticmethod
    def vjp(g, out, inputs):
        a, b = inputs
        return sum_to(g * b, a.shape), sum_to(g * a, b.shape)


class Div(Op):
    name = "div"

    @staticmethod
    def forward(a, b):
        return a / b

    @staticmethod
    def vjp(g, out, inputs):
        a, b = inputs
        return sum_to(g / b, a.shape), sum_to(neg(g * out / b), b.shape)


class Neg(Op):
    name = "neg"

    @staticmethod
    def forward(a):
        return -a

    @staticmethod
    def vjp(g, out, inputs):
        return (neg(g),)


class Power(Op):
    name = "power"

    @staticmethod
    def forward(a, p):
        return np.power(a, p)

    @staticmethod
    def vjp(g, out, inputs, p):
        (a,) = inputs
        if p == 1:
            return (g,)
        if p == 2:
            return (g * a * 2.0,)
        return (g * power(a, p - 1) * float(p),)


class Exp(Op):
    name = "exp"

    @staticmethod
    def forward(a):
        return np.exp(a)

    @staticmethod
    def vjp(g, out, inputs):
        return (g * out,)


class Log(Op):
    name = "log"

    @staticmethod
    def forward(a):
        return np.log(a)

    @staticmethod
    def vjp(g, out, inputs):
        return (g / inputs[0],)


class Sqrt(Op):
    name = "sqrt"

    @staticmethod
    def forward(a):
        return np.sqrt(a)

    @staticmethod
    def vjp(g, out, inputs):
        return (g / (out * 2.0),)


class Step(Op):
    """Heaviside step ``1[x > 0]``; derivative zero everywhere it exists."""

    name = "step"

    @staticmethod
    def forward(a):
        return (a > 0).astype(np.float64)

    @staticmethod
    def vjp(g, out, inputs):
        return (None,)


class Sign(Op):
    name = "sign"

    @staticmethod
    def forward(a):
        return np.sign(a)

    @staticmethod
    def vjp(g, out, inputs):
        return (None,)


class Relu(Op):
    name = "relu"

    @staticmethod
    def forward(a):
        return np.maximum(a, 0.0)

    @staticmethod
    def vjp(g, out, inputs):
        # subgradient 0 at the kink
        return (g * step(inputs[0]),)


class Abs(Op):
    name = "abs"

    @staticmethod
    def forward(a):
        return np.abs(a)

    @staticmethod
    def vjp(g, out, inputs):
        return (g * sign(inputs[0]),)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Sigmoid(Op):
    name = "sigmoid"

    @staticmethod
    def forward(a):
        return _sigmoid(a)

    @staticmethod
    def vjp(g, out, inputs):
        return (g * out * (1.0 - out),)


class Softplus(Op):
    """``log(1 + exp(beta * x)) / beta``, a smooth ReLU."""

    name = "softplus"

    @staticmethod
    def forward(a, beta):
        return np.logaddexp(0.0, beta * a) / beta

    @staticmethod
    def vjp(g, out, inputs, beta):
        return (g * sigmoid(inputs[0] * beta),)


def add(a, b):
    return apply(Add, a, b)


def sub(a, b):
    return apply(Sub, a, b)


def mul(a, b):
    return apply(Mul, a, b)


def div(a, b):
    return apply(Div, a, b)


def neg(a):
    return apply(Neg, a)


def power(a, p):
    return apply(Power, a, p=float(p) if not float(p).is_integer() else int(p))


def exp(a):
    return apply(Exp, a)


def log(a):
    return apply(Log, a)


def sqrt(a):
    return apply(Sqrt, a)


def step(a):
    return apply(Step, a)


def sign(a):
    return apply(Sign, a)


def relu(a):
    return apply(Relu, a)


def abs(a):  # noqa: A001 - mirrors numpy naming
    return apply(Abs, a)


def sigmoid(a):
    return apply(Sigmoid, a)


def softplus(a, beta: float = 10.0):
    return apply(Softplus, a, beta=float(beta))


# ---------------------------------------------------------------------------
# shape and reductions


class Reshape(Op):
    name = "reshape"

    @staticmethod
    def forward(a, shape):
        return a.reshape(shape)

    @staticmethod
    def vjp(g, out, inputs, shape):
        return (reshape(g, inputs[0].shape),)


class Transpose(Op):
    name = "transpose"

    @staticmethod
    def forward(a, axes):
        return np.transpose(a, axes)

    @staticmethod
    def vjp(g, out, inputs, axes):
        inv = None if axes is None else tuple(np.argsort(axes))
        return (transpose(g, inv),)


class Sum(Op):
    name = "sum"

    @staticmethod
    def forward(a, axis, keepdims):
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def vjp(g, out, inputs, axis, keepdims):
        shape = inputs[0].shape
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = tuple(ax % len(shape) for ax in axes)
            kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = reshape(g, kept)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)


class Index(Op):
    name = "index"

    @staticmethod
    def forward(a, key):
        return np.array(a[key], dtype=np.float64)

    @staticmethod
    def vjp(g, out, inputs, key):
        return (index_add(g, key, inputs[0].shape),)


class IndexAdd(Op):
    """Zeros of ``shape`` with ``g`` scatter-added at ``key`` (adjoint of indexing)."""

    name = "index_add"

    @staticmethod
    def forward(g, key, shape):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return out

    @staticmethod
    def vjp(h, out, inputs, key, shape):
        return (index(h, key),)


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if a.shape == shape:
        return a
    return apply(Reshape, a, shape=shape)


def transpose(a, axes=None):
    return apply(Transpose, a, axes=None if axes is None else tuple(axes))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return apply(Sum, a, axis=axis, keepdims=keepdims)


def index(a, key):
    return apply(Index, a, key=key)


def index_add(g, key, shape):
    return apply(IndexAdd, g, key=key, shape=tuple(shape))


def _flatten_axes(a: np.ndarray, axis) -> tuple[np.ndarray, tuple[int, ...]]:
    """Move reduction axes to the end and flatten them; returns (view, kept axes)."""
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
    keep = tuple(i for i in range(a.ndim) if i not in axes)
    moved = np.transpose(a, keep + axes)
    flat = moved.reshape(tuple(a.shape[i] for i in keep) + (-1,))
    return flat, keep


def _reduced_shape(shape, axis, keepdims):
    if axis is None:
        axes = tuple(range(len(shape)))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


class MaxGather(Op):
    """Values of ``h`` at the (first) argmax of ``x`` over ``axis``."""

    name = "max_gather"

    @staticmethod
    def forward(h, x, axis, keepdims):
        if h.shape != x.shape:
            raise ShapeError(f"value shape {h.shape} != selector shape {x.shape}")
        xf, _ = _flatten_axes(x, axis)
        hf, _ = _flatten_axes(h, axis)
        idx = np.argmax(xf, axis=-1)[..., None]
        out = np.take_along_axis(hf, idx, axis=-1)[..., 0]
        return out.reshape(_reduced_shape(x.shape, axis, keepdims))

    @staticmethod
    def vjp(g, out, inputs, axis, keepdims):
        h, x = inputs
        return max_scatter(g, x, axis, keepdims), None


class MaxScatter(Op):
    """Zeros shaped like ``x`` with ``g`` placed at the argmax of ``x`` over ``axis``."""

    name = "max_scatter"

    @staticmethod
    def forward(g, x, axis, keepdims):
        xf, keep = _flatten_axes(x, axis)
        idx = np.argmax(xf, axis=-1)[..., None]
        gf = g.reshape(xf.shape[:-1] + (1,))
        outf = np.zeros_like(xf)
        np.put_along_axis(outf, idx, gf, axis=-1)
        if axis is None:
            axes = tuple(range(x.ndim))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % x.ndim for ax in axes)
        moved_shape = tuple(x.shape[i] for i in keep) + tuple(x.shape[i] for i in axes)
        moved = outf.reshape(moved_shape)
        return np.transpose(moved, np.argsort(keep + axes))

    @staticmethod
    def vjp(h, out, inputs, axis, keepdims):
        g, x = inputs
        return max_gather(h, x, axis, keepdims), None


def max_gather(h, x, axis=None, keepdims=False):
    return apply(MaxGather, h, x, axis=axis, keepdims=keepdims)


def max_scatter(g, x, axis=None, keepdims=False):
    return apply(MaxScatter, g, x, axis=axis, keepdims=keepdims)


def max(a, axis=None, keepdims=False):  # noqa: A001
    """Maximum over ``axis``; the gradient flows to the first maximizer only."""
    if isinstance(axis, list):
        axis = tuple(axis)
    return apply(MaxGather, a, a, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# linear algebra


class MatMul(Op):
    name = "matmul"

    @staticmethod
    def forward(a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
        return a @ b

    @staticmethod
    def vjp(g, out, inputs):
        a, b = inputs
        return matmul(g, transpose(b)), matmul(transpose(a), g)


def matmul(a, b):
    return apply(MatMul, a, b)


# ---------------------------------------------------------------------------
# convolution (cross-correlation, NCHW, weights OIHW, no bias)


def _conv_geometry(h, w, kh, kw, stride, padding):
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    return ho, wo


def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    ph, pw = padding
    sh, sw = stride
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


class Conv2d(Op):
    name = "conv2d"

    @staticmethod
    def forward(x, w, stride, padding):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"input has {x.shape[1]} channels, weight expects {w.shape[1]}")
        o, c, kh, kw = w.shape
        cols, ho, wo = _im2col(x, kh, kw, stride, padding)
        y = cols @ w.reshape(o, -1).T
        return y.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2)

    @staticmethod
    def vjp(g, out, inputs, stride, padding):
        x, w = inputs
        return (
            conv2d_input_grad(g, w, x.shape[1:], stride, padding),
            conv2d_weight_grad(x, g, w.shape, stride, padding),
        )


class Conv2dInputGrad(Op):
    """Adjoint of conv2d in its input: maps output-space ``g`` to input space."""

    name = "conv2d_input_grad"

    @staticmethod
    def forward(g, w, in_shape, stride, padding):
        o, c, kh, kw = w.shape
        n = g.shape[0]
        _, h, wd = in_shape
        sh, sw = stride
        ph, pw = padding
        ho, wo = g.shape[2], g.shape[3]
        dcols = g.transpose(0, 2, 3, 1).reshape(-1, o) @ w.reshape(o, -1)
        dcols = dcols.reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, ph : ph + h, pw : pw + wd]

    @staticmethod
    def vjp(hgrad, out, inputs, in_shape, stride, padding):
        g, w = inputs
        # <h, A(w)^T g> = <A(w) h, g>
        return conv2d(hgrad, w, stride, padding), conv2d_weight_grad(hgrad, g, w.shape, stride, padding)


class Conv2dWeightGrad(Op):
    """Weight gradient of conv2d: bilinear in the input ``x`` and output-space ``g``."""

    name = "conv2d_weight_grad"

    @staticmethod
    def forward(x, g, w_shape, stride, padding):
        o, c, kh, kw = w_shape
        cols, ho, wo = _im2col(x, kh, kw, stride, padding)
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        return (g2.T @ cols).reshape(w_shape)

    @staticmethod
    def vjp(hw, out, inputs, w_shape, stride, padding):
        x, g = inputs
        # <H, dW(x, g)> = <conv(x, H), g>
        return conv2d_input_grad(g, hw, x.shape[1:], stride, padding), conv2d(x, hw, stride, padding)


def conv2d(x, w, stride=1, padding=0):
    return apply(Conv2d, x, w, stride=_pair(stride), padding=_pair(padding))


def conv2d_input_grad(g, w, in_shape, stride=1, padding=0):
    return apply(Conv2dInputGrad, g, w, in_shape=tuple(in_shape), stride=_pair(stride), padding=_pair(padding))


def conv2d_weight_grad(x, g, w_shape, stride=1, padding=0):
    return apply(Conv2dWeightGrad, x, g, w_shape=tuple(w_shape), stride=_pair(stride), padding=_pair(padding))


# ---------------------------------------------------------------------------
# pooling (non-overlapping windows, trailing rows/columns dropped)


class AvgPool2d(Op):
    name = "avgpool2d"

    @staticmethod
    def forward(x, kernel):
        kh, kw = kernel
        n, c, h, w = x.shape
        ho, wo = h // kh, w // kw
        if ho < 1 or wo < 1:
            raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
        v = x[:, :, : ho * kh, : wo * kw].reshape(n, c, ho, kh, wo, kw)
        return v.mean(axis=(3, 5))

    @staticmethod
    def vjp(g, out, inputs, kernel):
        return (avg_unpool2d(g, kernel, inputs[0].shape[2:]),)


class AvgUnpool2d(Op):
    """Adjoint of AvgPool2d."""

    name = "avgunpool2d"

    @staticmethod
    def forward(g, kernel, in_hw):
        kh, kw = kernel
        h, w = in_hw
        n, c, ho, wo = g.shape
        out = np.zeros((n, c, h, w))
        up = np.repeat(np.repeat(g, kh, axis=2), kw, axis=3) / (kh * kw)
        out[:, :, : ho * kh, : wo * kw] = up
        return out

    @staticmethod
    def vjp(h, out, inputs, kernel, in_hw):
        return (avg_pool2d(h, kernel),)


def avg_pool2d(x, kernel=2):
    return apply(AvgPool2d, x, kernel=_pair(kernel))


def avg_unpool2d(g, kernel, in_hw):
    return apply(AvgUnpool2d, g, kernel=_pair(kernel), in_hw=tuple(in_hw))


def _windows(x, kernel):
    kh, kw = kernel
    n, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    v = x[:, :, : ho * kh, : wo * kw].reshape(n, c, ho, kh, wo, kw)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kh * kw)


class PoolGather(Op):
    """Per window, the value of ``h`` where ``x`` attains its first maximum."""

    name = "maxpool_gather"

    @staticmethod
    def forward(h, x, kernel):
        if h.shape != x.shape:
            raise ShapeError(f"value shape {h.shape} != selector shape {x.shape}")
        idx = np.argmax(_windows(x, kernel), axis=-1)[..., None]
        return np.take_along_axis(_windows(h, kernel), idx, axis=-1)[..., 0]

    @staticmethod
    def vjp(g, out, inputs, kernel):
        h, x = inputs
        return pool_scatter(g, x, kernel), None


class PoolScatter(Op):
    """Adjoint of PoolGather in its first argument."""

    name = "maxpool_scatter"

    @staticmethod
    def forward(g, x, kernel):
        kh, kw = kernel
        n, c, h, w = x.shape
        win = _windows(x, kernel)
        ho, wo = win.shape[2], win.shape[3]
        idx = np.argmax(win, axis=-1)[..., None]
        flat = np.zeros_like(win)
        np.put_along_axis(flat, idx, g[..., None], axis=-1)
        blocks = flat.reshape(n, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kh, wo * kw)
        out = np.zeros_like(x)
        out[:, :, : ho * kh, : wo * kw] = blocks
        return out

    @staticmethod
    def vjp(h, out, inputs, kernel):
        g, x = inputs
        return pool_gather(h, x, kernel), None


def pool_gather(h, x, kernel):
    return apply(PoolGather, h, x, kernel=_pair(kernel))


def pool_scatter(g, x, kernel):
    return apply(PoolScatter, g, x, kernel=_pair(kernel))


def max_pool2d(x, kernel=2):
    return apply(PoolGather, x, x, kernel=_pair(kernel))


def global_max_pool2d(x):
    """(N, C, H, W) -> (N, C) spatial maximum."""
    return max(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# composites


def logsumexp(z, axis=-1):
    """Numerically stable log-sum-exp along ``axis`` (kept dimension dropped)."""
    z = as_tensor(z)
    m = Tensor(np.max(z.data, axis=axis, keepdims=True))
    s = sum(exp(z - m), axis=axis, keepdims=True)
    return reshape(log(s) + m, _reduced_shape(z.shape, axis, False))


def norm(x, ord=2, axis=None):
    """l2 or l1 norm over ``axis`` (all axes by default)."""
    if ord == 2:
        return sqrt(sum(x * x, axis=axis))
    if ord == 1:
        return sum(abs(x), axis=axis)
    raise ValueError(f"unsupported norm order {ord!r}")
