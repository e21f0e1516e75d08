"""Parameterized layers on top of the tensor tape."""

from __future__ import annotations

import numpy as np

from .tensor import F32, NnkitError, Param, Tensor, add, conv2d, linear


def _he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(F32)


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
                 rng: np.random.Generator | None = None, name: str = "conv",
                 weight_scale: float = 1.0):
        rng = rng or np.random.default_rng(0)
        self.w = Param(_he_init(rng, (cout, cin, k, k), cin * k * k) * F32(weight_scale), f"{name}.w")
        self.b = Param(np.zeros(cout, dtype=F32), f"{name}.b")
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self) -> list[Param]:
        return [self.w, self.b]


class Linear:
    def __init__(self, fin: int, fout: int, rng: np.random.Generator | None = None, name: str = "linear"):
        rng = rng or np.random.default_rng(0)
        self.w = Param(_he_init(rng, (fin, fout), fin), f"{name}.w")
        self.b = Param(np.zeros(fout, dtype=F32), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def params(self) -> list[Param]:
        return [self.w, self.b]


class RepConvBlock:
    """Training-time 3x3 + 1x1 conv branches that fuse into one 3x3 conv.

    No identity branch. In train mode the forward is conv3(x) + conv1(x);
    after fuse() a single 3x3 kernel (conv3 weights plus the 1x1 weights
    zero-padded into the kernel center) produces the same output.
    """

    def __init__(self, cin: int, cout: int, stride: int = 1,
                 rng: np.random.Generator | None = None, name: str = "repconv"):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.stride = stride
        self.cin = cin
        self.cout = cout
        self.w3 = Param(_he_init(rng, (cout, cin, 3, 3), cin * 9), f"{name}.w3")
        self.b3 = Param(np.zeros(cout, dtype=F32), f"{name}.b3")
        self.w1 = Param(_he_init(rng, (cout, cin, 1, 1), cin), f"{name}.w1")
        self.b1 = Param(np.zeros(cout, dtype=F32), f"{name}.b1")
        self.mode = "train"
        self.fused_w: Param | None = None
        self.fused_b: Param | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.mode == "fused":
            return conv2d(x, self.fused_w, self.fused_b, stride=self.stride, pad=1)
        y3 = conv2d(x, self.w3, self.b3, stride=self.stride, pad=1)
        y1 = conv2d(x, self.w1, self.b1, stride=self.stride, pad=0)
        if y3.shape != y1.shape:
            # stride-2 with odd input: align the 1x1 branch by cropping the 3x3
            raise NnkitError(f"repconv branch shapes diverge: {y3.shape} vs {y1.shape}")
        return add(y3, y1)

    def params(self) -> list[Param]:
        if self.mode == "fused":
            return [self.fused_w, self.fused_b]
        return [self.w3, self.b3, self.w1, self.b1]

    def fuse(self) -> "RepConvBlock":
        if self.mode == "fused":
            raise NnkitError("repconv block is already fused")
        fw = self.w3.data.copy()
        fw[:, :, 1, 1] += self.w1.data[:, :, 0, 0]
        fb = self.b3.data + self.b1.data
        self.fused_w = Param(fw, f"{self.name}.fw")
        self.fused_b = Param(fb, f"{self.name}.fb")
        self.mode = "fused"
        return self


def repconv_fuse(block: RepConvBlock) -> RepConvBlock:
    """Merge the two training branches into one inference kernel, in place."""
    return block.fuse()
