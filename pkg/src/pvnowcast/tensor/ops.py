"""Differentiable operations on :class:`Tensor`.

Broadcasting is intentionally narrow: elementwise ops accept equal shapes or a
scalar operand, and :func:`add_bias` handles the per-channel case. Anything
else raises :class:`ShapeError` naming the op and both shapes.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, log_branch, make_output


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1 and t.ndim <= 1


def _elementwise_operands(op: str, a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape).astype(t.dtype)


def add(a, b) -> Tensor:
    a, b = _elementwise_operands("add", a, b)
    return make_output(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _elementwise_operands("sub", a, b)
    return make_output(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0 and isinstance(a, Tensor):
        c = a.dtype.type(b)
        return make_output(a.data * c, (a,), lambda g: (g * c,), "mul")
    a, b = _elementwise_operands("mul", a, b)
    return make_output(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
        "mul",
    )


def add_bias(x: Tensor, bias: Tensor, axis: int = 1) -> Tensor:
    """Add a 1-D ``bias`` along ``axis`` (per-feature or per-channel)."""
    if bias.ndim != 1 or x.shape[axis] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias shape {bias.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    return make_output(x.data + bias.data.reshape(shape), (x, bias), lambda g: (g, g.sum(axis=other)), "add_bias")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return make_output(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
        out = out + bias.data
        inputs = (x, weight, bias)
    else:
        inputs = (x, weight)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_output(out, inputs, backward, "linear")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return make_output(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from exc
    return make_output(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return make_output(np.array(out, copy=True), (x,), backward, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * (axis % x.ndim) + (indices,), g)
        return (gx,)

    return make_output(np.take(x.data, indices, axis=axis), (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_output(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_output(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    return make_output(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    log_branch(mask)
    return make_output(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    log_branch(sign)
    return make_output(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_output(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.asarray(x.data.mean(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return make_output(out, (x,), backward, "mean")


def norm(x: Tensor, axis=None) -> Tensor:
    """Euclidean norm over ``axis`` (all elements by default).

    The subgradient at the origin is taken as zero.
    """
    sq = x.data * x.data
    n = np.sqrt(sq.sum(axis=axis))
    log_branch(n > 0)

    def backward(g):
        safe = np.where(n > 0, n, 1)
        scale = np.where(n > 0, g / safe, 0)
        if axis is not None:
            scale = np.expand_dims(scale, axis)
        return (x.data * scale,)

    return make_output(np.asarray(n), (x,), backward, "norm")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers define a fixed affine map.
    """
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeError(f"batch_norm: input {x.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    d = x.data
    if training:
        m = d.mean(axis=axes)
        centered = d - m.reshape(shape)
        var = (centered * centered).mean(axis=axes)
        count = d.size // d.shape[1]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= momentum
        running_mean += (1 - momentum) * m
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        m = running_mean.astype(d.dtype)
        var = running_var.astype(d.dtype)
        centered = d - m.reshape(shape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(d.dtype)
    xhat = centered * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if training:
            count = d.size // d.shape[1]
            dx = (inv_std / count).reshape(shape) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
            )
        else:
            dx = dxhat * inv_std.reshape(shape)
        return dx, dgamma, dbeta

    return make_output(out, (x, gamma, beta), backward, "batch_norm")


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, weight [out, in, kh, kw].

    Internally the input is viewed channels-last so each im2col row is laid
    out (kh, kw, C) with C contiguous.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weight shape {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape} (padding {padding})")
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    xn = x.data.transpose(0, 2, 3, 1)
    if pointwise:
        cols = xn.reshape(-1, c)
    else:
        if padding:
            xn = np.pad(xn, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        win = sliding_window_view(xn, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((gm.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            dcols = gm @ wmat
            if pointwise:
                gx = np.ascontiguousarray(dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2))
            else:
                dcols = dcols.reshape(n, ho, wo, kh, kw, c)
                gxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
                gx = np.ascontiguousarray(gxp[:, padding : padding + h, padding : padding + w].transpose(0, 3, 1, 2))
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, inputs, backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the lowest flat index in the window."""
    if x.ndim != 4 or x.shape[2] % kernel or x.shape[3] % kernel:
        raise ShapeError(f"max_pool2d: spatial dims of {x.shape} not divisible by {kernel}")
    n, c, h, w = x.shape
    k = kernel
    win = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = win.argmax(axis=-1)
    log_branch(idx.astype(np.uint8))
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, h // k, w // k, k * k), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_output(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour spatial upsampling of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2d: expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_output(out, (x,), backward, "upsample2d")
