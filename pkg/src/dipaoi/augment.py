"""The six classical augmentations with consistent box transformation.

Geometric ops (flip, mirror) move boxes; photometric ops (brightness,
median, noise, blur) copy them verbatim. All sample math runs in float and
is written back with the shared half-away-from-zero rounding.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .imaging import Image, round_half_away, save_image, load_image
from .rng import derive_rng
from .synth import Box, Manifest, SampleMeta


class AugmentError(ValueError):
    pass


def flip_v(img: Image, boxes: list[Box]) -> tuple[Image, list[Box]]:
    """Flip about the horizontal axis (top-bottom)."""
    out = Image(np.ascontiguousarray(img.pixels[::-1]))
    return out, [Box(b.cx, 1.0 - b.cy, b.w, b.h, b.cls) for b in boxes]


def mirror_h(img: Image, boxes: list[Box]) -> tuple[Image, list[Box]]:
    """Mirror about the vertical axis (left-right)."""
    out = Image(np.ascontiguousarray(img.pixels[:, ::-1]))
    return out, [Box(1.0 - b.cx, b.cy, b.w, b.h, b.cls) for b in boxes]


def adjust_brightness(img: Image, factor: float) -> Image:
    if not 0.1 <= factor <= 10.0:
        raise AugmentError(f"brightness factor {factor} outside [0.1, 10]")
    if factor == 1.0:
        return img.copy()
    scaled = round_half_away(img.pixels.astype(np.float64) * factor)
    return Image(np.clip(scaled, 0, 255).astype(np.uint8))


def median_filter(img: Image, k: int = 3) -> Image:
    """Per-channel window median with clamp-to-border edges."""
    if k not in (3, 5, 7):
        raise AugmentError(f"median window must be 3, 5 or 7, got {k}")
    pad = k // 2
    px = np.pad(img.pixels, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    h, w, c = img.pixels.shape
    stack = np.empty((k * k, h, w, c), dtype=np.uint8)
    idx = 0
    for dy in range(k):
        for dx in range(k):
            stack[idx] = px[dy : dy + h, dx : dx + w]
            idx += 1
    return Image(np.median(stack, axis=0).astype(np.uint8))


def add_noise(img: Image, amplitude: float = 12.0, seed: int = 0) -> Image:
    if amplitude < 0:
        raise AugmentError("noise amplitude must be >= 0")
    if amplitude == 0:
        return img.copy()
    rng = derive_rng(seed, 90_001)
    noise = rng.uniform(-amplitude, amplitude, size=img.pixels.shape)
    out = round_half_away(img.pixels.astype(np.float64) + noise)
    return Image(np.clip(out, 0, 255).astype(np.uint8))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian truncated at 3 sigma, normalized to sum 1."""
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: Image, sigma: float) -> Image:
    """Separable Gaussian blur with clamp-to-edge borders; sigma 0 is identity."""
    if sigma < 0:
        raise AugmentError("sigma must be >= 0")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    pad = len(k) // 2
    acc = img.pixels.astype(np.float64)
    padded = np.pad(acc, ((pad, pad), (0, 0), (0, 0)), mode="edge")
    acc = sum(padded[i : i + img.height] * k[i] for i in range(len(k)))
    padded = np.pad(acc, ((0, 0), (pad, pad), (0, 0)), mode="edge")
    acc = sum(padded[:, i : i + img.width] * k[i] for i in range(len(k)))
    return Image(np.clip(round_half_away(acc), 0, 255).astype(np.uint8))


# op-name registry used by augment_manifest and the CLI
GEOMETRIC_OPS = ("flip", "mirror")
PHOTOMETRIC_OPS = ("brightness", "median", "noise", "blur")
ALL_OPS = GEOMETRIC_OPS + PHOTOMETRIC_OPS


def apply_op(op: str, img: Image, boxes: list[Box], seed: int,
             brightness: float = 1.3, median_k: int = 3,
             noise_amplitude: float = 12.0, blur_sigma: float = 1.0) -> tuple[Image, list[Box]]:
    if op == "flip":
        return flip_v(img, boxes)
    if op == "mirror":
        return mirror_h(img, boxes)
    if op == "brightness":
        return adjust_brightness(img, brightness), list(boxes)
    if op == "median":
        return median_filter(img, median_k), list(boxes)
    if op == "noise":
        return add_noise(img, noise_amplitude, seed), list(boxes)
    if op == "blur":
        return gaussian_blur(img, blur_sigma), list(boxes)
    raise AugmentError(f"unknown augmentation op {op!r}")


def augment_manifest(manifest: Manifest, ops: list[str], out_dir, seed: int, **op_kwargs) -> Manifest:
    """One output sample per (input sample, op), written as PPM + manifest."""
    if not ops:
        raise AugmentError("ops list is empty")
    for op in ops:
        if op not in ALL_OPS:
            raise AugmentError(f"unknown augmentation op {op!r}")
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    result = Manifest(base_dir=str(out))
    for i, meta in enumerate(manifest.images):
        img = load_image(manifest.resolve(meta))
        for j, op in enumerate(ops):
            sample_seed = int(derive_rng(seed, i, j).integers(0, 2**31 - 1))
            new_img, new_boxes = apply_op(op, img, meta.boxes, sample_seed, **op_kwargs)
            stem = Path(meta.path).stem
            name = f"{stem}_{op}.ppm"
            save_image(new_img, out / name)
            result.images.append(SampleMeta(
                path=name, side=meta.side, width=new_img.width, height=new_img.height,
                source="augment", seed=sample_seed, boxes=new_boxes,
            ))
    result.save(out / "manifest.json")
    return result
