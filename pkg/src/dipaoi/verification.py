"""Finite-difference verification sweep over every differentiable operator.

Each operator is rebuilt on fresh random small shapes and checked against
central differences. Inputs are sampled away from kinks (relu elbows,
min/max ties, clamp edges) so the comparison is meaningful; the float32
tolerance is 1e-2 relative at epsilon 1e-3.
"""

from __future__ import annotations

import numpy as np

from . import nnkit as nk
from .nnkit.tensor import (
    add, arctan, avg_pool2, bce_with_logits, clamp, concat, conv2d, div, exp,
    getitem, leaky_relu, linear, log, maximum, mean, minimum, mse, mul,
    reshape, resize_nearest2d, sigmoid, sqrt, square, sub, tanh, tsum,
    upsample_nearest2, Tensor, Param,
)

F32 = np.float32
TOL = 1e-2
EPS = 1e-3


def _away_from(values: np.ndarray, kink: float, margin: float) -> np.ndarray:
    """Push values outside |v - kink| < margin, keeping their sign of offset."""
    off = values - kink
    off = np.where(np.abs(off) < margin, np.sign(off + 1e-12) * margin, off)
    return (kink + off).astype(F32)


def _rand(rng, shape, lo=-1.5, hi=1.5):
    return rng.uniform(lo, hi, size=shape).astype(F32)


def _case_builders(rng: np.random.Generator):
    """name -> callable returning (fn, params) on fresh random shapes."""

    def small_shape(maxdim=5, dims=2):
        return tuple(int(rng.integers(2, maxdim + 1)) for _ in range(dims))

    def unary(op, transform=None, lo=-1.5, hi=1.5):
        def build():
            x = Param(_rand(rng, small_shape(), lo, hi), "x")
            if transform is not None:
                x.data = transform(x.data)
            w = _rand(rng, x.data.shape)
            return (lambda: mean(mul(op(x), w))), [x]
        return build

    def binary(op, separate=0.0):
        def build():
            shape = small_shape()
            a = Param(_rand(rng, shape), "a")
            b = Param(_rand(rng, shape), "b")
            if separate:
                gap = np.abs(a.data - b.data) < separate
                b.data = np.where(gap, b.data + 2 * separate, b.data).astype(F32)
            w = _rand(rng, shape)
            return (lambda: mean(mul(op(a, b), w))), [a, b]
        return build

    def build_conv(stride, pad):
        def build():
            n = int(rng.integers(1, 3))
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            k = int(rng.choice([1, 3]))
            hw = int(rng.integers(max(3, k), 7))
            x = Param(_rand(rng, (n, cin, hw, hw), -0.8, 0.8), "x")
            w = Param(_rand(rng, (cout, cin, k, k), -0.5, 0.5), "w")
            b = Param(_rand(rng, (cout,), -0.3, 0.3), "b")
            oh = (hw + 2 * pad - k) // stride + 1
            wmap = _rand(rng, (n, cout, oh, oh))
            return (lambda: mean(mul(conv2d(x, w, b, stride=stride, pad=pad), wmap))), [x, w, b]
        return build

    def build_linear():
        f = int(rng.integers(2, 5))
        o = int(rng.integers(1, 4))
        n = int(rng.integers(1, 4))
        x = Param(_rand(rng, (n, f)), "x")
        w = Param(_rand(rng, (f, o)), "w")
        b = Param(_rand(rng, (o,)), "b")
        return (lambda: mean(tanh(linear(x, w, b)))), [x, w, b]

    def build_mse():
        shape = small_shape()
        a = Param(_rand(rng, shape), "a")
        b = Param(_rand(rng, shape), "b")
        return (lambda: mse(a, b)), [a, b]

    def build_bce():
        shape = small_shape()
        z = Param(_rand(rng, shape, -2.0, 2.0), "z")
        t = (rng.uniform(size=shape) > 0.5).astype(F32)
        return (lambda: mean(bce_with_logits(z, t))), [z]

    def build_upsample():
        x = Param(_rand(rng, (1, int(rng.integers(1, 3)), 3, 3)), "x")
        w = _rand(rng, (1, x.data.shape[1], 6, 6))
        return (lambda: mean(mul(upsample_nearest2(x), w))), [x]

    def build_resize():
        c = int(rng.integers(1, 3))
        x = Param(_rand(rng, (1, c, 4, 4)), "x")
        oh = int(rng.integers(2, 7))
        ow = int(rng.integers(2, 7))
        w = _rand(rng, (1, c, oh, ow))
        return (lambda: mean(mul(resize_nearest2d(x, oh, ow), w))), [x]

    def build_avgpool():
        c = int(rng.integers(1, 3))
        x = Param(_rand(rng, (1, c, 4, 4)), "x")
        w = _rand(rng, (1, c, 2, 2))
        return (lambda: mean(mul(avg_pool2(x), w))), [x]

    def build_getitem():
        x = Param(_rand(rng, (4, 5)), "x")
        idx = (np.array([0, 2, 3]), np.array([1, 1, 4]))
        return (lambda: mean(square(getitem(x, idx)))), [x]

    def build_concat():
        a = Param(_rand(rng, (2, 3)), "a")
        b = Param(_rand(rng, (3, 3)), "b")
        return (lambda: mean(square(concat([a, b], axis=0)))), [a, b]

    def build_reshape():
        x = Param(_rand(rng, (2, 6)), "x")
        return (lambda: mean(square(reshape(x, (3, 4))))), [x]

    def build_clamp():
        x = Param(_away_from(_away_from(_rand(rng, small_shape()), -0.8, 0.05), 0.8, 0.05), "x")
        w = _rand(rng, x.data.shape)
        return (lambda: mean(mul(clamp(x, -0.8, 0.8), w))), [x]

    def build_sum():
        x = Param(_rand(rng, small_shape()), "x")
        return (lambda: mul(tsum(x), 0.3)), [x]

    return {
        "conv2d_s1": build_conv(1, 1),
        "conv2d_s2": build_conv(2, 1),
        "conv2d_valid": build_conv(1, 0),
        "linear": build_linear,
        "leaky_relu": unary(lambda t: leaky_relu(t, 0.07),
                            transform=lambda v: _away_from(v, 0.0, 0.05)),
        "tanh": unary(tanh),
        "sigmoid": unary(sigmoid),
        "exp": unary(exp, lo=-1.0, hi=1.0),
        "log": unary(log, lo=0.2, hi=2.0),
        "sqrt": unary(sqrt, lo=0.2, hi=2.0),
        "square": unary(square),
        "arctan": unary(arctan),
        "add": binary(add),
        "sub": binary(sub),
        "mul": binary(mul),
        "div": binary(lambda a, b: div(a, b), separate=0.0),
        "maximum": binary(maximum, separate=0.05),
        "minimum": binary(minimum, separate=0.05),
        "clamp": build_clamp,
        "mean": unary(lambda t: t),
        "sum": build_sum,
        "mse": build_mse,
        "bce_with_logits": build_bce,
        "upsample_nearest2": build_upsample,
        "resize_nearest2d": build_resize,
        "avg_pool2": build_avgpool,
        "getitem": build_getitem,
        "concat": build_concat,
        "reshape": build_reshape,
    }


def nnkit_gradcheck_report(trials: int = 20, seed: int = 0, tol: float = TOL,
                           epsilon: float = EPS) -> dict:
    """Run every op's gradcheck on `trials` fresh shapes; aggregate worst error."""
    rng = np.random.default_rng(seed)
    # div needs denominators away from zero
    builders = _case_builders(rng)

    cases = {}
    for name, build in builders.items():
        worst = 0.0
        for _ in range(trials):
            fn, params = build()
            if name == "div":
                params[1].data = np.where(np.abs(params[1].data) < 0.25,
                                          np.sign(params[1].data + 1e-9) * 0.25,
                                          params[1].data).astype(F32)
            err = nk.grad_check(fn, params, epsilon=epsilon)
            worst = max(worst, err)
        cases[name] = {"max_rel_err": worst, "ok": bool(worst < tol)}
    return {
        "epsilon": epsilon,
        "tolerance": tol,
        "trials_per_op": trials,
        "cases": cases,
        "ok": all(c["ok"] for c in cases.values()),
    }
