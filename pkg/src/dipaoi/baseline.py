"""Threshold-based defect detector: band binarization and a count verdict.

A pixel becomes a feature when its gray value lies inside the inclusive
[min_gray, max_gray] band; the side is called defective when the feature
count reaches the preset TB. A zero feature count is always normal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .imaging import Image, channel_subtract, ImagingError
from .synth import Manifest, Side

PREPROCESS_MODES = ("none", "r_minus_g", "g_minus_b")


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdConfig:
    side: Side
    min_gray: int = 40
    max_gray: int = 110
    tb: int = 100
    preprocess: str = "r_minus_g"

    def validate(self) -> None:
        if not (0 <= self.min_gray <= self.max_gray <= 255):
            raise BaselineError(f"need 0 <= min_gray <= max_gray <= 255, got [{self.min_gray}, {self.max_gray}]")
        if self.tb < 1:
            raise BaselineError(f"tb must be >= 1, got {self.tb}")
        if self.preprocess not in PREPROCESS_MODES:
            raise BaselineError(f"unknown preprocess {self.preprocess!r}")

    def as_dict(self) -> dict:
        return {
            "side": self.side.value,
            "min_gray": self.min_gray,
            "max_gray": self.max_gray,
            "tb": self.tb,
            "preprocess": self.preprocess,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdConfig":
        cfg = cls(side=Side(d["side"]), min_gray=int(d["min_gray"]), max_gray=int(d["max_gray"]),
                  tb=int(d["tb"]), preprocess=d.get("preprocess", "r_minus_g"))
        cfg.validate()
        return cfg


@dataclass
class BaselineVerdict:
    verdict: str              # "normal" | "defective"
    feature_count: int
    featured: Image


def default_configs() -> list[ThresholdConfig]:
    """Startup configs; the defect palette pops in R-G on every side."""
    return [ThresholdConfig(side=s) for s in Side]


def save_configs(configs: list[ThresholdConfig], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([c.as_dict() for c in configs], f, indent=1)


def load_configs(path) -> list[ThresholdConfig]:
    with open(path, encoding="utf-8") as f:
        return [ThresholdConfig.from_dict(d) for d in json.load(f)]


def apply_preprocess(img: Image, preprocess: str) -> Image:
    if preprocess == "none":
        if img.channels != 1:
            raise ImagingError("RGB input needs a channel-subtraction preprocess")
        return img
    if preprocess == "r_minus_g":
        return channel_subtract(img, "r", "g")
    if preprocess == "g_minus_b":
        return channel_subtract(img, "g", "b")
    raise BaselineError(f"unknown preprocess {preprocess!r}")


def binarize(img: Image, cfg: ThresholdConfig) -> Image:
    """255 where min_gray <= g <= max_gray (inclusive both ends), else 0."""
    cfg.validate()
    if img.channels != 1:
        raise ImagingError("binarize needs a single-channel image; preprocess first")
    g = img.pixels[:, :, 0]
    mask = (g >= cfg.min_gray) & (g <= cfg.max_gray)
    return Image(np.where(mask, 255, 0).astype(np.uint8)[:, :, None])


def classify(img: Image, cfg: ThresholdConfig) -> BaselineVerdict:
    """Feature count against TB; zero features is always a normal verdict."""
    gray = apply_preprocess(img, cfg.preprocess)
    featured = binarize(gray, cfg)
    count = int(np.count_nonzero(featured.pixels))
    verdict = "defective" if count >= cfg.tb else "normal"
    return BaselineVerdict(verdict=verdict, feature_count=count, featured=featured)


# ---------------------------------------------------------------------------
# Threshold tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchGrid:
    min_gray_values: tuple[int, ...] = tuple(range(0, 256, 8))
    max_gray_values: tuple[int, ...] = tuple(range(7, 256, 8))
    tb_values: tuple[int, ...] = (25, 50, 100, 200, 400)
    preprocess_values: tuple[str, ...] = ("r_minus_g", "g_minus_b")


def tune_thresholds(manifest: Manifest, side: Side, grid: SearchGrid | None = None,
                    images: dict[str, Image] | None = None) -> ThresholdConfig:
    """Grid point maximizing detection accuracy on the side's labeled samples.

    Ties break toward the narrower band, then the smaller TB. Histogram
    prefix sums make each band's feature count an O(1) lookup per image.
    """
    from .imaging import load_image

    grid = grid or SearchGrid()
    side = Side(side)
    samples = [m for m in manifest.images if m.side == side]
    if not samples:
        raise BaselineError(f"no samples for side {side.value}")
    labels = np.array([1 if m.boxes else 0 for m in samples], dtype=bool)

    best = None  # (accuracy, -span, -tb) maximized
    best_cfg = None
    for preprocess in grid.preprocess_values:
        cums = []
        for m in samples:
            img = images[m.path] if images is not None else load_image(manifest.resolve(m))
            gray = apply_preprocess(img, preprocess)
            hist = np.bincount(gray.pixels.reshape(-1), minlength=256)
            cums.append(np.concatenate([[0], np.cumsum(hist)]))
        cums = np.array(cums)  # (n, 257)
        for lo in grid.min_gray_values:
            for hi in grid.max_gray_values:
                if hi < lo:
                    continue
                counts = cums[:, hi + 1] - cums[:, lo]
                for tb in grid.tb_values:
                    pred = counts >= tb
                    acc = float(np.mean(pred == labels))
                    key = (acc, -(hi - lo), -tb)
                    if best is None or key > best:
                        best = key
                        best_cfg = ThresholdConfig(side=side, min_gray=lo, max_gray=hi,
                                                   tb=tb, preprocess=preprocess)
    return best_cfg


def tune_all_sides(manifest: Manifest, grid: SearchGrid | None = None) -> list[ThresholdConfig]:
    return [tune_thresholds(manifest, side, grid) for side in Side
            if any(m.side == side for m in manifest.images)]
