"""Procedural six-sided DIP renderer with labeled defect injection.

Stands in for a proprietary inspection dataset: deterministic per-seed
renders of the six component sides plus four defect kinds drawn at
controlled painted-pixel areas. Painted area is measured at generation
resolution as the count of pixels the injection actually changed, and the
returned box is the tight bounding box of those pixels.

The palette is chosen so that every defect pops in the R-G difference
channel (band roughly [40, 110]) while normal structures stay below it
even under the bounded +/-6 texture noise; that is what makes the
threshold baseline separable on clean renders.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .imaging import Image, save_image
from .rng import derive_rng

MIN_RENDER_SIZE = 64
MIN_BENT_PIN_SIZE = 192

BG = (100, 100, 100)
BODY = (88, 64, 60)
PIN = (150, 150, 154)
ACTUATOR = (196, 200, 204)
MARKING = (140, 136, 130)
GLUE = (190, 110, 70)
SCRATCH = (216, 146, 110)
DIRT = (150, 98, 88)
BENT = (232, 150, 108)

NOISE_SPAN = 6  # uniform per-channel texture noise, bounded


class SynthError(ValueError):
    pass


class DefectIncompatibleError(SynthError):
    """Requested defect kind cannot be drawn on this side's geometry."""


class Side(str, Enum):
    FRONT = "front"
    BACK = "back"
    TOP = "top"
    BOTTOM = "bottom"
    LEFT = "left"
    RIGHT = "right"


SIDES = list(Side)
LONG_SIDES = (Side.FRONT, Side.BACK, Side.TOP, Side.BOTTOM)


class DefectKind(str, Enum):
    GLUE_OVERFLOW = "glue_overflow"
    SCRATCH = "scratch"
    DIRT = "dirt"
    BENT_PIN = "bent_pin"


SURFACE_KINDS = (DefectKind.GLUE_OVERFLOW, DefectKind.SCRATCH, DefectKind.DIRT)

DETECTOR_CLASS = {
    DefectKind.GLUE_OVERFLOW: "surface_defect",
    DefectKind.SCRATCH: "surface_defect",
    DefectKind.DIRT: "surface_defect",
    DefectKind.BENT_PIN: "pin_defect",
}

CLASS_NAMES = ("surface_defect", "pin_defect")

# painted-pixel bounds per kind at generation scale
AREA_BOUNDS = {
    DefectKind.GLUE_OVERFLOW: (100, 300),
    DefectKind.SCRATCH: (100, 500),
    DefectKind.DIRT: (100, 300),
    DefectKind.BENT_PIN: (220, 250),
}


@dataclass(frozen=True)
class Box:
    """Normalized center-size box tagged with a detector class."""

    cx: float
    cy: float
    w: float
    h: float
    cls: str = "surface_defect"

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise SynthError(f"box center out of range: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise SynthError(f"box size out of range: ({self.w}, {self.h})")
        if self.cls not in CLASS_NAMES:
            raise SynthError(f"unknown detector class {self.cls!r}")

    def as_dict(self) -> dict:
        return {"class": self.cls, "cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(cx=d["cx"], cy=d["cy"], w=d["w"], h=d["h"], cls=d["class"])


@dataclass
class SampleMeta:
    path: str
    side: Side
    width: int
    height: int
    source: str  # synthetic | consingan | augment
    seed: int
    boxes: list[Box] = field(default_factory=list)
    defect_kinds: list[DefectKind] | None = None  # in-memory only

    def as_dict(self) -> dict:
        return {
            "path": self.path,
            "side": self.side.value,
            "width": self.width,
            "height": self.height,
            "source": self.source,
            "seed": self.seed,
            "boxes": [b.as_dict() for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleMeta":
        return cls(
            path=d["path"],
            side=Side(d["side"]),
            width=d["width"],
            height=d["height"],
            source=d["source"],
            seed=d["seed"],
            boxes=[Box.from_dict(b) for b in d["boxes"]],
        )

    def subject(self) -> str:
        """Virtual workpiece id, encoded as the path's leading token."""
        stem = Path(self.path).name
        return stem.split("_", 1)[0]


@dataclass
class Manifest:
    images: list[SampleMeta] = field(default_factory=list)
    base_dir: str = "."

    def save(self, path) -> None:
        doc = {"version": 1, "images": [m.as_dict() for m in self.images]}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1)
        self.base_dir = str(Path(path).parent)

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        if doc.get("version") != 1:
            raise SynthError(f"unsupported manifest version {doc.get('version')!r}")
        return cls(images=[SampleMeta.from_dict(d) for d in doc["images"]],
                   base_dir=str(Path(path).parent))

    def resolve(self, meta: SampleMeta) -> str:
        return str(Path(self.base_dir) / meta.path)


# ---------------------------------------------------------------------------
# Side geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PinGeom:
    rect: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    tip: str                         # "down" or "up": which edge is the free end


@dataclass(frozen=True)
class SideGeometry:
    body: tuple[int, int, int, int]
    pins: tuple[PinGeom, ...]
    actuators: tuple[tuple[int, int, int, int], ...] = ()
    markings: tuple[tuple[int, int, int, int], ...] = ()


def _r(size: int, a: float, b: float, c: float, d: float) -> tuple[int, int, int, int]:
    return (round(a * size), round(b * size), round(c * size), round(d * size))


def _pin_columns(size: int, x0f: float, x1f: float, n: int, wf: float) -> list[tuple[int, int]]:
    w = max(3, round(wf * size))
    xs = np.linspace(x0f * size, x1f * size - w, n)
    return [(int(round(x)), int(round(x)) + w) for x in xs]


def side_geometry(side: Side, size: int) -> SideGeometry:
    """Deterministic layout of body, pins, actuators for one side at one scale."""
    if size < MIN_RENDER_SIZE:
        raise SynthError(f"render size {size} below minimum {MIN_RENDER_SIZE}")
    npins = 8
    pin_wf = 0.016
    if side in (Side.FRONT, Side.BACK):
        body = _r(size, 0.10, 0.25, 0.90, 0.62)
        cols = _pin_columns(size, 0.14, 0.86, npins, pin_wf)
        y0, y1 = round(0.62 * size), round(0.62 * size) + max(6, round(0.055 * size))
        pins = tuple(PinGeom((x0, y0, x1, y1), "down") for x0, x1 in cols)
        markings = ()
        if side is Side.FRONT:
            markings = tuple(
                _r(size, 0.16 + i * 0.10, 0.32, 0.22 + i * 0.10, 0.37) for i in range(6)
            )
        return SideGeometry(body=body, pins=pins, markings=markings)
    if side is Side.TOP:
        body = _r(size, 0.10, 0.30, 0.90, 0.70)
        cols = _pin_columns(size, 0.14, 0.86, npins, pin_wf)
        tab = max(5, round(0.022 * size))
        up = tuple(PinGeom((x0, round(0.30 * size) - tab, x1, round(0.30 * size)), "up") for x0, x1 in cols)
        down = tuple(PinGeom((x0, round(0.70 * size), x1, round(0.70 * size) + tab), "down") for x0, x1 in cols)
        acts = tuple(_r(size, 0.15 + i * 0.09, 0.42, 0.20 + i * 0.09, 0.58) for i in range(npins))
        return SideGeometry(body=body, pins=up + down, actuators=acts)
    if side is Side.BOTTOM:
        body = _r(size, 0.10, 0.30, 0.90, 0.70)
        cols = _pin_columns(size, 0.14, 0.86, npins, pin_wf)
        leg = max(6, round(0.055 * size))
        up = tuple(PinGeom((x0, round(0.30 * size) - leg, x1, round(0.30 * size)), "up") for x0, x1 in cols)
        down = tuple(PinGeom((x0, round(0.70 * size), x1, round(0.70 * size) + leg), "down") for x0, x1 in cols)
        return SideGeometry(body=body, pins=up + down)
    # short end caps
    body = _r(size, 0.30, 0.28, 0.70, 0.66)
    cols = _pin_columns(size, 0.33, 0.67, 2, pin_wf)
    y0, y1 = round(0.66 * size), round(0.66 * size) + max(6, round(0.055 * size))
    pins = tuple(PinGeom((x0, y0, x1, y1), "down") for x0, x1 in cols)
    if side is Side.LEFT:
        markings = (_r(size, 0.32, 0.31, 0.40, 0.36),)
    else:
        markings = (_r(size, 0.60, 0.31, 0.68, 0.36),)
    return SideGeometry(body=body, pins=pins, markings=markings)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _fill(px: np.ndarray, rect, color) -> None:
    x0, y0, x1, y1 = rect
    px[max(0, y0) : max(0, y1), max(0, x0) : max(0, x1)] = color


def lighting_params(side: Side, seed: int, lighting: float) -> tuple[float, np.ndarray]:
    """Per-sample illumination: brightness factor and RGB cast.

    `lighting` in [0, 1] scales the variation; 0 reproduces flat studio
    light. Deterministic per (side, seed).
    """
    if lighting <= 0.0:
        return 1.0, np.zeros(3)
    rng = derive_rng(seed, 300 + SIDES.index(side))
    factor = 1.0 + lighting * float(rng.uniform(-0.30, 0.30))
    cast = lighting * rng.uniform(-8.0, 8.0, size=3)
    return factor, cast


def _apply_lighting(px: np.ndarray, factor: float, cast: np.ndarray) -> np.ndarray:
    if factor == 1.0 and not cast.any():
        return px
    return (px.astype(np.float64) * factor + cast).astype(np.int16)


def render_normal(side: Side, size: int, seed: int, lighting: float = 0.0) -> Image:
    """Render a defect-free side view with per-seed bounded texture noise.

    With lighting > 0 each sample also gets a deterministic brightness
    factor and color cast, widening the appearance distribution.
    """
    side = Side(side)
    geom = side_geometry(side, size)
    px = np.empty((size, size, 3), dtype=np.int16)
    px[:] = BG
    _fill(px, geom.body, BODY)
    for rect in geom.markings:
        _fill(px, rect, MARKING)
    for rect in geom.actuators:
        _fill(px, rect, ACTUATOR)
    for pin in geom.pins:
        _fill(px, pin.rect, PIN)
    factor, cast = lighting_params(side, seed, lighting)
    px = _apply_lighting(px, factor, cast)
    rng = derive_rng(seed, SIDES.index(side))
    noise = rng.integers(-NOISE_SPAN, NOISE_SPAN + 1, size=px.shape, dtype=np.int16)
    return Image(np.clip(px + noise, 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# Defect injection
# ---------------------------------------------------------------------------

def _disk_mask(size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.ogrid[:size, :size]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float) -> np.ndarray:
    yy, xx = np.ogrid[:size, :size]
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


def _quad_mask(size: int, corners: np.ndarray) -> np.ndarray:
    """Filled convex quad; corners in order, float (x, y) pairs.

    Edge tests run only on the quad's clipped bounding box.
    """
    x_lo = max(0, int(np.floor(corners[:, 0].min())) - 1)
    x_hi = min(size, int(np.ceil(corners[:, 0].max())) + 2)
    y_lo = max(0, int(np.floor(corners[:, 1].min())) - 1)
    y_hi = min(size, int(np.ceil(corners[:, 1].max())) + 2)
    mask = np.zeros((size, size), dtype=bool)
    if x_hi <= x_lo or y_hi <= y_lo:
        return mask
    yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    inside = np.ones(yy.shape, dtype=bool)
    n = len(corners)
    for i in range(n):
        x0, y0 = corners[i]
        x1, y1 = corners[(i + 1) % n]
        cross = (x1 - x0) * (yy + 0.5 - y0) - (y1 - y0) * (xx + 0.5 - x0)
        inside &= cross >= 0
    mask[y_lo:y_hi, x_lo:x_hi] = inside
    return mask


def _polyline_mask(size: int, points: np.ndarray, width: float, limit: float) -> np.ndarray:
    """Stamp disks along the path up to arc-length fraction `limit`."""
    mask = np.zeros((size, size), dtype=bool)
    seg_lens = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = float(seg_lens.sum())
    budget = total * limit
    r = max(0.5, width / 2.0)
    step = 0.45
    walked = 0.0
    for (x0, y0), (x1, y1), L in zip(points[:-1], points[1:], seg_lens):
        if budget <= walked:
            break
        use = min(L, budget - walked)
        nsteps = max(1, int(use / step))
        for t in np.linspace(0.0, use / L if L > 0 else 0.0, nsteps + 1):
            cx, cy = x0 + (x1 - x0) * t, y0 + (y1 - y0) * t
            xi0, xi1 = int(cx - r - 1), int(cx + r + 2)
            yi0, yi1 = int(cy - r - 1), int(cy + r + 2)
            xi0, yi0 = max(0, xi0), max(0, yi0)
            xi1, yi1 = min(size, xi1), min(size, yi1)
            if xi1 <= xi0 or yi1 <= yi0:
                continue
            yy, xx = np.ogrid[yi0:yi1, xi0:xi1]
            mask[yi0:yi1, xi0:xi1] |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        walked += use
    return mask


def _paint(px: np.ndarray, mask: np.ndarray, color, rng, light=None) -> None:
    base = np.asarray(color, dtype=np.float64)
    if light is not None:
        base = base * light[0] + light[1]
    noise = rng.integers(-NOISE_SPAN, NOISE_SPAN + 1, size=(int(mask.sum()), 3), dtype=np.int16)
    px[mask] = np.clip(base.astype(np.int16) + noise, 0, 255).astype(np.uint8)


def _monotone_fit(measure, lo: float, hi: float, bounds: tuple[int, int], iters: int = 40):
    """Find a parameter where the (non-decreasing) measured area enters bounds."""
    a_lo, a_hi = bounds
    target = (a_lo + a_hi) / 2.0
    best_p, best_area = None, None
    for _ in range(iters):
        mid = (lo + hi) / 2.0
        area = measure(mid)
        if a_lo <= area <= a_hi:
            return mid, area
        if best_area is None or abs(area - target) < abs(best_area - target):
            best_p, best_area = mid, area
        if area < target:
            lo = mid
        else:
            hi = mid
    return best_p, best_area


def _glue_params(geom: SideGeometry, rng) -> tuple[float, float]:
    """A point on the body outline, where overflowed glue would sit."""
    x0, y0, x1, y1 = geom.body
    edge = rng.integers(0, 4)
    if edge == 0:
        return float(rng.uniform(x0 + 4, x1 - 4)), float(y0)
    if edge == 1:
        return float(rng.uniform(x0 + 4, x1 - 4)), float(y1)
    if edge == 2:
        return float(x0), float(rng.uniform(y0 + 4, y1 - 4))
    return float(x1), float(rng.uniform(y0 + 4, y1 - 4))


def inject_defect(img: Image, side: Side, kind: DefectKind, seed: int,
                  geometry: SideGeometry | None = None,
                  light: tuple | None = None) -> tuple[Image, Box]:
    """Draw one defect on a rendered side; returns the new image and its box.

    Deterministic per (img, side, kind, seed). The box tightly bounds the
    pixels that changed, and the painted-pixel count is guaranteed to fall
    inside AREA_BOUNDS[kind]. `light` carries the render's (factor, cast)
    so the painted colors track the sample's illumination.
    """
    side = Side(side)
    kind = DefectKind(kind)
    size = img.width
    if img.height != img.width:
        raise SynthError("defect injection expects square renders")
    geom = geometry if geometry is not None else side_geometry(side, size)
    if kind is DefectKind.BENT_PIN and not geom.pins:
        raise DefectIncompatibleError(f"side {side.value} has no pins for a bent_pin defect")
    if kind is DefectKind.BENT_PIN and size < MIN_BENT_PIN_SIZE:
        raise SynthError(f"bent_pin needs size >= {MIN_BENT_PIN_SIZE}, got {size}")

    rng = derive_rng(seed, 7000 + list(DefectKind).index(kind))
    before = img.pixels
    out = before.copy()
    a_lo, a_hi = AREA_BOUNDS[kind]

    if kind is DefectKind.GLUE_OVERFLOW:
        cx, cy = _glue_params(geom, rng)
        target = int(rng.integers(a_lo + 25, a_hi - 25))
        mask, _ = _fit_area(lambda r: _disk_mask(size, cx, cy, r), 2.0, 14.0,
                            (target - 20, target + 20))
        _paint(out, mask, GLUE, rng, light)
    elif kind is DefectKind.DIRT:
        x0, y0, x1, y1 = geom.body
        cx = float(rng.uniform(x0 + 12, x1 - 12))
        cy = float(rng.uniform(y0 + 10, y1 - 10))
        ratio = float(rng.uniform(0.45, 0.95))
        target = int(rng.integers(a_lo + 25, a_hi - 25))
        mask, _ = _fit_area(lambda s: _ellipse_mask(size, cx, cy, s, s * ratio), 2.0, 18.0,
                            (target - 20, target + 20))
        _paint(out, mask, DIRT, rng, light)
    elif kind is DefectKind.SCRATCH:
        x0, y0, x1, y1 = geom.body
        width = float(rng.choice([1.0, 2.0, 3.0]))
        target = int(rng.integers(a_lo + 20, a_hi - 20))
        def waypoint():
            return np.array([rng.uniform(x0 + 4, x1 - 4), rng.uniform(y0 + 4, y1 - 4)])

        pts = [waypoint()]
        n_segs = int(rng.integers(2, 5))
        seg = 0
        while seg < n_segs or int(_polyline_mask(size, np.array(pts), width, 1.0).sum()) < target + 20:
            nxt = waypoint()
            if np.linalg.norm(nxt - pts[-1]) < 0.12 * (x1 - x0):
                continue
            pts.append(nxt)
            seg += 1
            if seg > 60:
                raise SynthError("scratch path failed to reach target area")
        pts = np.array(pts)
        mask, _ = _fit_area(lambda t: _polyline_mask(size, pts, width, t), 0.02, 1.0,
                            (max(a_lo + 5, target - 30), min(a_hi - 5, target + 30)))
        _paint(out, mask, SCRATCH, rng, light)
    else:  # bent pin
        mask = _bent_pin_mask(out, geom, size, rng, light)
        # painting happens inside; mask returned for box computation

    changed = np.any(out != before, axis=2)
    area = int(changed.sum())
    if not (a_lo <= area <= a_hi):
        raise SynthError(f"{kind.value} painted area {area} outside [{a_lo}, {a_hi}]")
    ys, xs = np.nonzero(changed)
    bx0, bx1 = int(xs.min()), int(xs.max()) + 1
    by0, by1 = int(ys.min()), int(ys.max()) + 1
    box = Box(
        cx=(bx0 + bx1) / 2.0 / size,
        cy=(by0 + by1) / 2.0 / size,
        w=(bx1 - bx0) / size,
        h=(by1 - by0) / size,
        cls=DETECTOR_CLASS[kind],
    )
    return Image(out), box


def _fit_area(mask_fn, lo: float, hi: float, bounds) -> tuple[np.ndarray, int]:
    def measure(p):
        return int(mask_fn(p).sum())

    p, area = _monotone_fit(measure, lo, hi, bounds)
    if p is None:
        raise SynthError("could not fit defect area into bounds")
    return mask_fn(p), area


def _rotate(points: np.ndarray, pivot: np.ndarray, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    rel = points - pivot
    return pivot + rel @ np.array([[c, s], [-s, c]])


def _bent_pin_mask(out: np.ndarray, geom: SideGeometry, size: int, rng,
                   light=None) -> np.ndarray:
    """Erase one pin's distal segment and redraw it rotated about the kink.

    The changed region is (erased tip) union (rotated highlight segment);
    the rotation angle is fitted so its pixel count lands in AREA_BOUNDS.
    """
    a_lo, a_hi = AREA_BOUNDS[DefectKind.BENT_PIN]
    pin = geom.pins[int(rng.integers(0, len(geom.pins)))]
    x0, y0, x1, y1 = pin.rect
    w = x1 - x0
    h = y1 - y0
    sign = 1.0 if rng.random() < 0.5 else -1.0

    def build(theta_deg: float, length: float, w_draw: int):
        half = (w_draw - w) / 2.0
        qx0, qx1 = x0 - half, x1 + half
        if pin.tip == "down":
            kink_y = max(y0, y1 - min(length, h))
            pivot = np.array([(x0 + x1) / 2.0, kink_y])
            quad = np.array([
                [qx0, kink_y], [qx1, kink_y],
                [qx1, kink_y + length], [qx0, kink_y + length],
            ], dtype=float)
            erase = (x0, int(kink_y), x1, y1)
        else:
            kink_y = min(y1, y0 + min(length, h))
            pivot = np.array([(x0 + x1) / 2.0, kink_y])
            quad = np.array([
                [qx0, kink_y - length], [qx1, kink_y - length],
                [qx1, kink_y], [qx0, kink_y],
            ], dtype=float)
            erase = (x0, y0, x1, int(kink_y))
        rot = _rotate(quad, pivot, sign * math.radians(theta_deg))
        qmask = _quad_mask(size, rot if _signed_area(rot) > 0 else rot[::-1])
        emask = np.zeros((size, size), dtype=bool)
        emask[erase[1]: erase[3], erase[0]: erase[2]] = True
        return emask | qmask, emask, qmask

    # rasterized sliver area is a step function of the angle, so scan a
    # deterministic (width, length, angle) grid instead of bisecting
    found = None
    for w_draw in (w, w + 1, w + 2):
        for dlen in sorted(np.arange(-8.0, 41.0, 2.0), key=abs):
            length = max(4.0, (a_lo + a_hi) / 2.0 * 0.72 / w_draw + dlen)
            for theta in np.linspace(5.0, 20.0, 61):
                area = int(build(theta, length, w_draw)[0].sum())
                if a_lo + 2 <= area <= a_hi - 2:
                    found = (theta, length, w_draw)
                    break
            if found:
                break
        if found:
            break
    if found is None:
        raise SynthError("bent pin area fit failed")
    union, emask, qmask = build(*found)
    bg = np.asarray(BG, dtype=np.float64)
    if light is not None:
        bg = bg * light[0] + light[1]
    bg_noise = rng.integers(-NOISE_SPAN, NOISE_SPAN + 1, size=(int(emask.sum()), 3), dtype=np.int16)
    out[emask] = np.clip(bg.astype(np.int16) + bg_noise, 0, 255).astype(np.uint8)
    _paint(out, qmask, BENT, rng, light)
    return union


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

SURFACE_MIX = 0.507  # share of surface defects among defect images


@dataclass
class DatasetSpec:
    """Counts per (side, kind) plus defect-free renders, at one square size."""

    defect_counts: dict[tuple[Side, DefectKind], int]
    normal_count: int = 0
    size: int = 416
    multi_defect: bool = False
    lighting: float = 0.0

    def total_defects(self) -> int:
        return sum(self.defect_counts.values())


def desk_spec(n_defects: int, normal_count: int = 0, size: int = 416,
              lighting: float = 0.0) -> DatasetSpec:
    """Small profile mirroring the paper's 50.7/49.3 surface/pin class mix."""
    n_surface = round(n_defects * SURFACE_MIX)
    n_pin = n_defects - n_surface
    counts: dict[tuple[Side, DefectKind], int] = {}
    combos = [(s, k) for s in SIDES for k in SURFACE_KINDS]
    for i in range(n_surface):
        key = combos[i % len(combos)]
        counts[key] = counts.get(key, 0) + 1
    for i in range(n_pin):
        key = (SIDES[i % len(SIDES)], DefectKind.BENT_PIN)
        counts[key] = counts.get(key, 0) + 1
    return DatasetSpec(defect_counts=counts, normal_count=normal_count, size=size,
                       lighting=lighting)


# per-side defect image counts reported for the generated dataset
PAPER_SURFACE_COUNTS = {
    Side.FRONT: 340, Side.BACK: 228, Side.TOP: 209,
    Side.BOTTOM: 183, Side.LEFT: 310, Side.RIGHT: 346,
}
PAPER_PIN_COUNTS = {
    Side.FRONT: 321, Side.BACK: 216, Side.TOP: 201,
    Side.BOTTOM: 177, Side.LEFT: 325, Side.RIGHT: 327,
}


def paper_spec(size: int = 416, normal_count: int = 0) -> DatasetSpec:
    counts: dict[tuple[Side, DefectKind], int] = {}
    for side, n in PAPER_SURFACE_COUNTS.items():
        for i, kind in enumerate(SURFACE_KINDS):
            share = n // len(SURFACE_KINDS) + (1 if i < n % len(SURFACE_KINDS) else 0)
            counts[(side, kind)] = share
    for side, n in PAPER_PIN_COUNTS.items():
        counts[(side, DefectKind.BENT_PIN)] = n
    return DatasetSpec(defect_counts=counts, normal_count=normal_count, size=size)


def generate_dataset(spec: DatasetSpec, out_dir, seed: int) -> Manifest:
    """Render the requested samples to PPM files plus a manifest.json.

    Every sample's randomness derives from (seed, sample index), so the
    output is identical whether samples are rendered serially or not.
    """
    if spec.total_defects() + spec.normal_count <= 0:
        raise SynthError("dataset spec is empty")
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)

    jobs: list[tuple[Side, DefectKind | None]] = []
    for (side, kind), n in sorted(spec.defect_counts.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)):
        jobs.extend([(side, kind)] * n)
    for i in range(spec.normal_count):
        jobs.append((SIDES[i % len(SIDES)], None))

    manifest = Manifest(base_dir=str(out))
    for idx, (side, kind) in enumerate(jobs):
        sample_seed = int(derive_rng(seed, idx).integers(0, 2**31 - 1))
        img = render_normal(side, spec.size, sample_seed, lighting=spec.lighting)
        light = lighting_params(side, sample_seed, spec.lighting)
        boxes: list[Box] = []
        kinds: list[DefectKind] = []
        if kind is not None:
            n_defects = 1
            if spec.multi_defect:
                n_defects = int(derive_rng(seed, idx, 1).integers(1, 3))
            for j in range(n_defects):
                img, box = inject_defect(img, side, kind, sample_seed + j, light=light)
                boxes.append(box)
                kinds.append(kind)
        tag = kind.value if kind is not None else "normal"
        wp = idx // 6
        name = f"wp{wp:05d}_{side.value}_{tag}_{idx:05d}.ppm"
        save_image(img, out / name)
        manifest.images.append(SampleMeta(
            path=name, side=side, width=spec.size, height=spec.size,
            source="synthetic", seed=sample_seed, boxes=boxes,
            defect_kinds=kinds or None,
        ))
    manifest.save(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _largest_remainder(n: int, ratios) -> list[int]:
    raw = [n * r for r in ratios]
    base = [int(math.floor(x)) for x in raw]
    rem = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    return base


def sample_class(meta: SampleMeta) -> str:
    if not meta.boxes:
        return "normal"
    return meta.boxes[0].cls


def split_dataset(manifest: Manifest, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Manifest, Manifest, Manifest]:
    """Deterministic stratified train/val/test partition.

    Stratified by detector class (normal / surface / pin). Global split
    sizes follow largest-remainder apportionment of the full count; the
    final stratum absorbs the rounding drift so the totals are exact.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SynthError("split ratios must sum to 1")
    if not manifest.images:
        raise SynthError("cannot split an empty manifest")

    strata: dict[str, list[SampleMeta]] = {}
    for m in manifest.images:
        strata.setdefault(sample_class(m), []).append(m)

    total = len(manifest.images)
    global_targets = _largest_remainder(total, ratios)
    remaining = list(global_targets)
    names = sorted(strata)
    splits: list[list[SampleMeta]] = [[], [], []]
    for si, name in enumerate(names):
        group = sorted(strata[name], key=lambda m: m.path)
        rng = derive_rng(seed, 40_000 + si)
        rng.shuffle(group)
        if si == len(names) - 1:
            alloc = list(remaining)
        else:
            alloc = _largest_remainder(len(group), ratios)
            # never allocate more than the global split still needs
            for k in range(3):
                alloc[k] = min(alloc[k], remaining[k])
            drift = len(group) - sum(alloc)
            k = 0
            while drift > 0:
                if remaining[k] > alloc[k]:
                    alloc[k] += 1
                    drift -= 1
                else:
                    k = (k + 1) % 3
        pos = 0
        for k in range(3):
            splits[k].extend(group[pos : pos + alloc[k]])
            remaining[k] -= alloc[k]
            pos += alloc[k]
    if any(r != 0 for r in remaining):
        raise SynthError(f"split allocation drifted: {remaining}")
    out = []
    for part in splits:
        out.append(Manifest(images=sorted(part, key=lambda m: m.path), base_dir=manifest.base_dir))
    return tuple(out)
