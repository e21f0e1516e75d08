"""Reverse-mode autodiff tape over float32 numpy arrays.

Each op builds a new Tensor holding its parents and a closure that maps the
output gradient to parent gradients. backward() walks the tape in reverse
topological order. Every op output is checked for NaN/Inf so a diverging
training run faults at the op that produced the first non-finite value.
"""

from __future__ import annotations

import numpy as np

F32 = np.float32


class NnkitError(RuntimeError):
    pass


class ShapeError(NnkitError):
    pass


class NonFiniteError(NnkitError):
    pass


def _f32(x) -> np.ndarray:
    a = np.asarray(x, dtype=F32)
    return a


def _guard(data: np.ndarray, opname: str) -> np.ndarray:
    # float64 sum propagates any NaN/Inf and cannot overflow on f32 inputs,
    # so one fast reduction replaces a full isfinite pass
    if not np.isfinite(data.sum(dtype=np.float64)):
        raise NonFiniteError(f"non-finite value produced by {opname}")
    return data


class Tensor:
    """A float32 array plus the tape bookkeeping to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, name: str = ""):
        self.data = _f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable grad-requiring leaf."""
        if self.data.size != 1:
            raise ShapeError("backward() starts from a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf: accumulate into the public grad buffer
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                if acc is None:
                    grads[id(p)] = pg.astype(F32, copy=False)
                else:
                    acc += pg

    # operator sugar (scalars allowed on either side)
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

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, grad={self.requires_grad})"


class Param(Tensor):
    """Named trainable leaf; grad is zeroed by the optimizer at step start."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = _guard(a.data + b.data, "add")
    return Tensor(out_data, _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = _guard(a.data - b.data, "sub")
    return Tensor(out_data, _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = _guard(a.data * b.data, "mul")

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = _guard(a.data / b.data, "div")

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return (ga, gb)

    return Tensor(out_data, _parents=(a, b), _backward=bwd)


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(_guard(a.data * a.data, "square"), _parents=(a,),
                  _backward=lambda g: (g * 2.0 * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = _guard(np.sqrt(a.data), "sqrt")
    return Tensor(out_data, _parents=(a,), _backward=lambda g: (g * 0.5 / out_data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = _guard(np.exp(a.data), "exp")
    return Tensor(out_data, _parents=(a,), _backward=lambda g: (g * out_data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = _guard(np.log(a.data), "log")
    return Tensor(out_data, _parents=(a,), _backward=lambda g: (g / a.data,))


def arctan(a) -> Tensor:
    a = as_tensor(a)
    out_data = _guard(np.arctan(a.data), "arctan")
    return Tensor(out_data, _parents=(a,), _backward=lambda g: (g / (1.0 + a.data * a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = _guard(np.tanh(a.data), "tanh")
    return Tensor(out_data, _parents=(a,), _backward=lambda g: (g * (1.0 - out_data * out_data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    z = a.data
    out_data = _guard(np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z))).astype(F32), "sigmoid")
    return Tensor(out_data, _parents=(a,), _backward=lambda g: (g * out_data * (1.0 - out_data),))


def leaky_relu(a, slope: float = 0.05) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, F32(slope) * a.data)
    return Tensor(_guard(out_data, "leaky_relu"), _parents=(a,),
                  _backward=lambda g: (np.where(mask, g, F32(slope) * g),))


def leaky_relu_data(x: np.ndarray, slope: float = 0.05) -> np.ndarray:
    return np.where(x > 0, x, F32(slope) * x)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = (a.data >= b.data).astype(F32)
    out_data = _guard(np.maximum(a.data, b.data), "maximum")

    def bwd(g):
        return (_unbroadcast(g * take_a, a.data.shape), _unbroadcast(g * (1.0 - take_a), b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bwd)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = (a.data <= b.data).astype(F32)
    out_data = _guard(np.minimum(a.data, b.data), "minimum")

    def bwd(g):
        return (_unbroadcast(g * take_a, a.data.shape), _unbroadcast(g * (1.0 - take_a), b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bwd)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(F32)
    return Tensor(_guard(np.clip(a.data, lo, hi), "clamp"), _parents=(a,),
                  _backward=lambda g: (g * inside,))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out_data = np.ascontiguousarray(a.data[key])

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, key, g.reshape(a.data[key].shape))
        return (z,)

    return Tensor(_guard(out_data, "getitem"), _parents=(a,), _backward=bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        outs = []
        for t, o0, o1 in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(o0), int(o1))
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return Tensor(_guard(out_data, "concat"), _parents=tuple(tensors), _backward=bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data.reshape(shape), _parents=(a,),
                  _backward=lambda g: (g.reshape(a.data.shape),))


# ---------------------------------------------------------------------------
# Reductions and losses
# ---------------------------------------------------------------------------

def tsum(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(_guard(a.data.sum(dtype=F32), "sum"), _parents=(a,),
                  _backward=lambda g: (np.broadcast_to(g, a.data.shape).astype(F32),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = F32(a.data.size)
    return Tensor(_guard(a.data.mean(dtype=F32), "mean"), _parents=(a,),
                  _backward=lambda g: ((np.broadcast_to(g, a.data.shape) / n).astype(F32),))


def mse(a, b) -> Tensor:
    """Mean squared error, normalized per element."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse shape mismatch {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = F32(diff.size)
    out_data = _guard(np.mean(diff * diff, dtype=F32), "mse")

    def bwd(g):
        base = (2.0 / n) * diff * g
        return (base, -base)

    return Tensor(out_data, _parents=(a, b), _backward=bwd)


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (targets are constants).

    Stable form max(z,0) - z*t + log(1+exp(-|z|)); gradient sigmoid(z) - t.
    Callers mask/reduce the elementwise result themselves.
    """
    z = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=F32)
    if t.shape != z.data.shape:
        raise ShapeError(f"bce shape mismatch {z.data.shape} vs {t.shape}")
    zd = z.data
    out_data = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    sig = np.where(zd >= 0, 1.0 / (1.0 + np.exp(-zd)), np.exp(zd) / (1.0 + np.exp(zd))).astype(F32)
    return Tensor(_guard(out_data.astype(F32), "bce_with_logits"), _parents=(z,),
                  _backward=lambda g: (g * (sig - t),))


# ---------------------------------------------------------------------------
# Convolution (NCHW) via im2col + GEMM
# ---------------------------------------------------------------------------

def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(N,C,H,W) -> (C*kh*kw, N*OH*OW) patch matrix.

    Row-major over (c, i, j) and column-major over (n, oh, ow), so each row
    copy scans the padded input with unit stride along ow.
    """
    n, c, h, w = xd.shape
    if pad > 0:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = xd
    else:
        xp = xd
    oh = _conv_out_dim(h, kh, stride, pad)
    ow = _conv_out_dim(w, kw, stride, pad)
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, n, oh, ow),
        strides=(s1, s2, s3, s0, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(c * kh * kw, n * oh * ow)


def _conv_forward(xd: np.ndarray, wd: np.ndarray, bd: np.ndarray | None,
                  stride: int, pad: int):
    """Raw conv forward; returns (out NCHW, cols) with cols reusable in backward."""
    n, c, h, w = xd.shape
    oc, cin, kh, kw = wd.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    oh = _conv_out_dim(h, kh, stride, pad)
    ow = _conv_out_dim(w, kw, stride, pad)
    cols = _im2col(xd, kh, kw, stride, pad)              # (C*kh*kw, N*OH*OW)
    out = wd.reshape(oc, c * kh * kw) @ cols             # (OC, N*OH*OW)
    if bd is not None:
        out += bd[:, None]
    out4 = np.ascontiguousarray(out.reshape(oc, n, oh, ow).transpose(1, 0, 2, 3))
    return out4, cols


def conv2d_data(xd: np.ndarray, wd: np.ndarray, bd: np.ndarray | None = None,
                stride: int = 1, pad: int = 0) -> np.ndarray:
    """Graph-free conv forward for frozen/inference paths."""
    return _conv_forward(np.asarray(xd, F32), np.asarray(wd, F32),
                         None if bd is None else np.asarray(bd, F32), stride, pad)[0]


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add (C*kh*kw, N*OH*OW) patch gradients back onto the input."""
    n, c, h, w = x_shape
    oh = _conv_out_dim(h, kh, stride, pad)
    ow = _conv_out_dim(w, kw, stride, pad)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=F32)
    dc = dcols.reshape(c, kh, kw, n, oh, ow)
    for i in range(kh):
        for j in range(kw):
            target = dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            target += dc[:, i, j].transpose(1, 0, 2, 3)
    if pad > 0:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), x (N,C,H,W), w (OC,C,KH,KW), b (OC,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d wants 4-D input and kernel")
    n, c, h, wd = x.data.shape
    oc, cin, kh, kw = w.data.shape
    bt = as_tensor(b) if b is not None else None
    if bt is not None and bt.data.shape != (oc,):
        raise ShapeError(f"conv2d bias shape {bt.data.shape}, want ({oc},)")
    oh = _conv_out_dim(h, kh, stride, pad)
    ow = _conv_out_dim(wd, kw, stride, pad)
    out, cols = _conv_forward(x.data, w.data, None if bt is None else bt.data, stride, pad)

    parents = (x, w) if bt is None else (x, w, bt)

    def bwd(g):
        # (N,OC,OH,OW) -> (OC, N*OH*OW); free for n == 1
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, n * oh * ow)
        gw = (gmat @ cols.T).reshape(w.data.shape)
        gx = None
        if x.requires_grad:
            dcols = w.data.reshape(oc, c * kh * kw).T @ gmat
            gx = _col2im(dcols, x.data.shape, kh, kw, stride, pad)
        if bt is None:
            return (gx, gw)
        return (gx, gw, gmat.sum(axis=1))

    return Tensor(_guard(out, "conv2d"), _parents=parents, _backward=bwd)


def linear(x, w, b=None) -> Tensor:
    """Fully connected layer: x (N,F) @ w (F,O) + b."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear shape mismatch {x.data.shape} @ {w.data.shape}")
    out = x.data @ w.data
    bt = as_tensor(b) if b is not None else None
    if bt is not None:
        out = out + bt.data
    parents = (x, w) if bt is None else (x, w, bt)

    def bwd(g):
        gx = g @ w.data.T
        gw = x.data.T @ g
        if bt is None:
            return (gx, gw)
        return (gx, gw, _unbroadcast(g, bt.data.shape))

    return Tensor(_guard(out, "linear"), _parents=parents, _backward=bwd)


# ---------------------------------------------------------------------------
# Resampling ops
# ---------------------------------------------------------------------------

def upsample_nearest2(x) -> Tensor:
    """Nearest-neighbor 2x upsample on (N,C,H,W)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest2 wants NCHW")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.data.shape

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor(_guard(out, "upsample_nearest2"), _parents=(x,), _backward=bwd)


def resize_nearest2d(x, oh: int, ow: int) -> Tensor:
    """Nearest resize to (oh, ow) on (N,C,H,W), half-pixel-center sampling."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("resize_nearest2d wants NCHW")
    n, c, h, w = x.data.shape
    ys = np.minimum(((np.arange(oh) + 0.5) * (h / oh)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(ow) + 0.5) * (w / ow)).astype(np.int64), w - 1)
    out = x.data[:, :, ys][:, :, :, xs]
    flat_idx = (ys[:, None] * w + xs[None, :]).reshape(-1)

    def bwd(g):
        gz = np.zeros((h * w, n * c), dtype=F32)
        gmat = g.reshape(n * c, oh * ow).T
        np.add.at(gz, flat_idx, gmat)
        return (gz.T.reshape(n, c, h, w),)

    return Tensor(_guard(np.ascontiguousarray(out), "resize_nearest2d"), _parents=(x,), _backward=bwd)


def avg_pool2(x) -> Tensor:
    """2x2 stride-2 average pooling; requires even spatial dims."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2 needs even height and width")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=F32)

    def bwd(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * F32(0.25),)

    return Tensor(_guard(out, "avg_pool2"), _parents=(x,), _backward=bwd)
