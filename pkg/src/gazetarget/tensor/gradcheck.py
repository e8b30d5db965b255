"""Finite-difference gradient checking and the per-op check suite."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import ops
from .core import Tensor, backward

#: gradients smaller than this are compared in absolute rather than relative terms
GRAD_FLOOR = 1e-7


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, index=None) -> np.ndarray:
    """Central differences (f(x+eps) - f(x-eps)) / (2 eps) of a scalar function.

    ``index`` restricts the computation to selected flat positions; the
    returned array then has one entry per selected position.
    """
    flat = x.data.reshape(-1)
    positions = range(flat.size) if index is None else index
    out = np.empty(len(positions), dtype=np.float64)
    for n, i in enumerate(positions):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        out[n] = (hi - lo) / (2 * eps)
    return out if index is not None else out.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, tol: float | None = None) -> float:
    """Max relative error between backprop and central differences for ``f`` at ``x``.

    ``x`` must hold float64 data. When ``tol`` is given, an AssertionError is
    raised if the error exceeds it.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check needs float64 input")
    x.requires_grad = True
    x.grad = None
    y = f(x)
    backward(y)
    analytic = x.grad.copy()
    numeric = numeric_grad(f, x, eps)
    err = relative_error(analytic, numeric)
    if tol is not None and err > tol:
        raise AssertionError(f"gradient check failed: max relative error {err:.3e} > {tol:.1e}")
    return err


def _projected(op: Callable[..., Tensor], args: list, slot: int, rng: np.random.Generator):
    """Scalar test function sum(op(...) * R) of the argument in ``slot``."""
    probe = op(*[Tensor(a) if isinstance(a, np.ndarray) else a for a in args])
    weights = rng.standard_normal(probe.shape)

    def f(x: Tensor) -> Tensor:
        call = [Tensor(a) if isinstance(a, np.ndarray) else a for a in args]
        call[slot] = x
        return ops.sum(ops.mul(op(*call), weights))

    return f


def _case_conv(rng):
    b, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    side = int(rng.integers(k, 7))
    args = [rng.standard_normal((b, cin, side, side)), rng.standard_normal((cout, cin, k, k)),
            rng.standard_normal(cout)]
    return (lambda x, w, bias: ops.conv2d(x, w, bias, stride, pad)), args


def _case_deconv(rng):
    b, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(2, 5))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if k > 2 else 0
    side = int(rng.integers(2, 5))
    args = [rng.standard_normal((b, cin, side, side)), rng.standard_normal((cin, cout, k, k)),
            rng.standard_normal(cout)]
    return (lambda x, w, bias: ops.conv_transpose2d(x, w, bias, stride, pad)), args


def _case_pool(op):
    def make(rng):
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 4))
        side = int(rng.integers(k, 8))
        x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 3)), side, side))
        return (lambda t: op(t, k, stride)), [x]
    return make


def _case_linear(rng):
    b, n, m = (int(v) for v in rng.integers(1, 6, size=3))
    return ops.linear, [rng.standard_normal((b, n)), rng.standard_normal((m, n)), rng.standard_normal(m)]


def _case_unary(op, scale=2.0):
    def make(rng):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        return op, [scale * rng.standard_normal(shape)]
    return make


def _case_binary(op):
    def make(rng):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
        other = shape if rng.random() < 0.5 else (1,) + shape[1:]
        return op, [rng.standard_normal(shape), rng.standard_normal(other)]
    return make


def _case_concat(rng):
    b, h, w = (int(v) for v in rng.integers(1, 4, size=3))
    return ops.concat_channels, [rng.standard_normal((b, int(rng.integers(1, 4)), h, w)),
                                 rng.standard_normal((b, int(rng.integers(1, 4)), h, w))]


def _case_softmax(rng):
    shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
    axis = int(rng.integers(0, 2))
    return (lambda x: ops.softmax(x, axis)), [rng.standard_normal(shape)]


def _case_mse(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=2))
    return ops.mse_loss, [rng.standard_normal(shape), rng.standard_normal(shape)]


def _case_bce(rng):
    n = int(rng.integers(1, 8))
    labels = rng.integers(0, 2, size=n).astype(float)
    return (lambda z: ops.bce_loss(z, labels)), [3 * rng.standard_normal(n)]


def _case_tile(rng):
    b, c = (int(v) for v in rng.integers(1, 4, size=2))
    side = int(rng.integers(1, 5))
    return (lambda x: ops.tile_spatial(x, side)), [rng.standard_normal((b, c))]


def _case_minmax(rng):
    b, c, s = int(rng.integers(1, 3)), 1, int(rng.integers(2, 6))
    return ops.minmax_normalize, [rng.standard_normal((b, c, s, s))]


def _case_select(rng):
    n = int(rng.integers(2, 6))
    idx = rng.integers(0, n, size=int(rng.integers(1, 5)))
    return (lambda x: ops.select(x, idx)), [rng.standard_normal((n, 3))]


def _case_reduce(op):
    def make(rng):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
        axis = None if rng.random() < 0.3 else int(rng.integers(0, 3))
        return (lambda x: op(x, axis=axis)), [rng.standard_normal(shape)]
    return make


#: op name -> case factory returning (callable, list of float64 arguments)
OP_CASES: dict[str, Callable] = {
    "conv2d": _case_conv,
    "conv_transpose2d": _case_deconv,
    "max_pool2d": _case_pool(ops.max_pool2d),
    "avg_pool2d": _case_pool(ops.avg_pool2d),
    "linear": _case_linear,
    "sigmoid": _case_unary(ops.sigmoid),
    "tanh": _case_unary(ops.tanh),
    "relu": _case_unary(ops.relu),
    "clip_min": _case_unary(lambda x: ops.clip_min(x, 0.1)),
    "sub_scalar": _case_unary(lambda x: ops.sub_scalar(x, 0.7)),
    "add": _case_binary(ops.add),
    "mul": _case_binary(ops.mul),
    "concat_channels": _case_concat,
    "flatten": _case_unary(lambda x: ops.flatten(ops.reshape(x, (1,) + x.shape))),
    "softmax": _case_softmax,
    "tile_spatial": _case_tile,
    "minmax_normalize": _case_minmax,
    "select": _case_select,
    "sum": _case_reduce(ops.sum),
    "mean": _case_reduce(ops.mean),
    "mse_loss": _case_mse,
    "bce_loss": _case_bce,
}


def run_op_suite(cases: int = 20, seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error per op over ``cases`` random instances.

    Every argument slot of every op is checked.
    """
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for name, make in OP_CASES.items():
        err = 0.0
        for _ in range(cases):
            op, args = make(rng)
            for slot in range(len(args)):
                f = _projected(op, args, slot, rng)
                err = max(err, grad_check(f, Tensor(args[slot].copy()), eps))
        worst[name] = err
    return worst


def timed_op_suite(cases: int = 20, seed: int = 0) -> tuple[dict[str, float], float]:
    start = time.perf_counter()
    result = run_op_suite(cases, seed)
    return result, time.perf_counter() - start
