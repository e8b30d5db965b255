"""Differentiable operations.

Image-like tensors are laid out (batch, channel, height, width). Convolutions
use the cross-correlation convention, as deep-learning frameworks do; the
transposed convolution takes weights shaped (in, out, kh, kw) and is the
exact adjoint of ``conv2d`` with the same weight.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .core import Tensor, as_tensor


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product; a python scalar or any numpy-broadcastable operand."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def sub_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data - x.data.dtype.type(c)
    return Tensor._from_op(out, (x,), lambda g: (g,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor._from_op(t, (x,), lambda g: (g * (1 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def clip_min(x: Tensor, floor: float = 0.0) -> Tensor:
    """max(x, floor); the subgradient is 1 at and above the floor, 0 below."""
    floor = x.data.dtype.type(floor)
    mask = x.data >= floor
    return Tensor._from_op(np.maximum(x.data, floor), (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: non-channel extents differ, {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor._from_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if np.sum(sizes) != x.shape[1]:
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not sum to {x.shape[1]}")
    parts = []
    start = 0
    for n in sizes:
        lo, hi = start, start + n

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        parts.append(Tensor._from_op(x.data[:, lo:hi].copy(), (x,), backward))
        start = hi
    return parts


def select(x: Tensor, index: Sequence[int]) -> Tensor:
    """Rows of ``x`` along the leading axis."""
    idx = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(x.data[idx], (x,), backward)


def tile_spatial(x: Tensor, side: int) -> Tensor:
    """Broadcast a (B, C) vector to a (B, C, side, side) map."""
    out = np.broadcast_to(x.data[:, :, None, None], x.shape + (side, side)).copy()
    return Tensor._from_op(out, (x,), lambda g: (g.sum(axis=(2, 3)),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (x,), backward)


def minmax_normalize(x: Tensor) -> Tensor:
    """Rescale each sample to [0, 1]; constant samples map to 0.5."""
    b = x.shape[0]
    flat = x.data.reshape(b, -1)
    lo_idx = flat.argmin(axis=1)
    hi_idx = flat.argmax(axis=1)
    rows = np.arange(b)
    lo = flat[rows, lo_idx][:, None]
    hi = flat[rows, hi_idx][:, None]
    span = hi - lo
    const = (span == 0)[:, 0]
    safe = np.where(span == 0, 1, span)
    n = np.where(span == 0, x.data.dtype.type(0.5), (flat - lo) / safe)

    def backward(g):
        gf = g.reshape(b, -1)
        gx = gf / safe
        d_lo = (gf * (n - 1)).sum(axis=1) / safe[:, 0]
        d_hi = -(gf * n).sum(axis=1) / safe[:, 0]
        gx[rows, lo_idx] += d_lo
        gx[rows, hi_idx] += d_hi
        gx[const] = 0
        return (gx.reshape(x.shape),)

    return Tensor._from_op(n.reshape(x.shape), (x,), backward)


# ---------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._from_op(out, parents, backward)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, C, Hp, Wp) -> view (B, C, Ho, Wo, kh, kw)
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _scatter_patches(cols: np.ndarray, out_shape, stride: int) -> np.ndarray:
    """Sum (B, Ho, Wo, C, kh, kw) patches into a (B, C, Hp, Wp) canvas."""
    b, ho, wo, c, kh, kw = cols.shape
    canvas = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return canvas


def _check_conv(x: Tensor, weight: Tensor, in_axis: int, stride: int, pad: int, name: str) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"{name}: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(
            f"{name}: input has {x.shape[1]} channels but weight {weight.shape} expects "
            f"{weight.shape[in_axis]}"
        )
    if stride < 1 or pad < 0:
        raise ShapeError(f"{name}: stride must be >= 1 and pad >= 0")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation. weight is (out, in, kh, kw)."""
    _check_conv(x, weight, 1, stride, pad, "conv2d")
    cout, cin, kh, kw = weight.shape
    xp = _pad(x.data, pad)
    if kh > xp.shape[2] or kw > xp.shape[3]:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {xp.shape[2:]}")
    win = _windows(xp, kh, kw, stride)
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        grads = []
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # B, Ho, Wo, Cin, kh, kw
            gxp = _scatter_patches(cols, xp.shape, stride)
            if pad:
                gxp = gxp[:, :, pad:-pad, pad:-pad]
            grads.append(gxp)
        else:
            grads.append(None)
        grads.append(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._from_op(out, parents, backward)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Transposed convolution; weight is (in, out, kh, kw).

    Output side is (H - 1) * stride - 2 * pad + kh.
    """
    _check_conv(x, weight, 0, stride, pad, "conv_transpose2d")
    cin, cout, kh, kw = weight.shape
    b, _, h, w = x.shape
    full_shape = (b, cout, (h - 1) * stride + kh, (w - 1) * stride + kw)
    if full_shape[2] - 2 * pad < 1 or full_shape[3] - 2 * pad < 1:
        raise ShapeError(f"conv_transpose2d: padding {pad} leaves no output for input {x.shape}")
    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # B, H, W, Cout, kh, kw
    full = _scatter_patches(cols, full_shape, stride)
    out = full[:, :, pad:full_shape[2] - pad, pad:full_shape[3] - pad]
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        win = _windows(_pad(g, pad), kh, kw, stride)  # B, Cout, H, W, kh, kw
        grads = [
            np.ascontiguousarray(
                np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            )
            if x.requires_grad
            else None,
            np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])),
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._from_op(out, parents, backward)


def _check_pool(x: Tensor, k: int, stride: int, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected 4-d input, got {x.shape}")
    if k < 1 or stride < 1 or k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"{name}: window {k} (stride {stride}) does not fit input {x.shape}")


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max over k x k windows. Ties route the gradient to the first cell in row-major order."""
    stride = k if stride is None else stride
    _check_pool(x, k, stride, "max_pool2d")
    win = _windows(x.data, k, k, stride)
    b, c, ho, wo = win.shape[:4]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        bi, ci, hi, wi = np.indices(arg.shape)
        rows = hi * stride + arg // k
        cols = wi * stride + arg % k
        np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    _check_pool(x, k, stride, "avg_pool2d")
    win = _windows(x.data, k, k, stride)
    out = win.mean(axis=(-2, -1))
    ho, wo = out.shape[2:]

    def backward(g):
        gx = np.zeros_like(x.data)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += share
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return Tensor._from_op(np.asarray(np.mean(diff * diff)), (pred, target), backward)


def bce_loss(logit: Tensor, label) -> Tensor:
    """Mean binary cross-entropy computed from logits without overflow."""
    y = np.asarray(label, dtype=logit.dtype)
    if y.shape != logit.shape:
        raise ShapeError(f"bce_loss: logit {logit.shape} vs label {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss: labels must be 0 or 1")
    z = logit.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        return (g * (expit(z) - y) / n,)

    return Tensor._from_op(np.asarray(per.mean()), (logit,), backward)
