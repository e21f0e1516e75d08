"""Raster type, PPM I/O, channel arithmetic, resampling, and camera optics.

Everything downstream (renderer, augmentation, threshold detector, GAN,
detector) moves pixels through the `Image` type defined here. Samples are
8-bit; filter math runs in float and is rounded half-away-from-zero on
write-back so results are identical across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CHANNEL_NAMES = {"r": 0, "g": 1, "b": 2}


class ImagingError(ValueError):
    """Malformed image data, header, or incompatible channel layout."""


class Image:
    """Owned 8-bit raster, gray (1 channel) or RGB (3 channels).

    Pixels are stored as a (height, width, channels) uint8 array; `data`
    exposes the row-major flat view the wire formats use.
    """

    __slots__ = ("pixels",)

    def __init__(self, pixels: np.ndarray):
        px = np.asarray(pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ImagingError(f"expected HxWx1 or HxWx3 pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ImagingError("image dimensions must be >= 1")
        if px.dtype != np.uint8:
            raise ImagingError(f"expected uint8 samples, got {px.dtype}")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def data(self) -> bytes:
        return self.pixels.tobytes()

    @classmethod
    def new(cls, width: int, height: int, channels: int = 3, fill: int = 0) -> "Image":
        return cls(np.full((height, width, channels), fill, dtype=np.uint8))

    def copy(self) -> "Image":
        return Image(self.pixels.copy())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Image)
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )

    def __repr__(self) -> str:
        return f"Image({self.width}x{self.height}x{self.channels})"


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero (np.round rounds half to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Optics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraSpec:
    """Camera + lens parameters; pixel_size in micrometers, distances in mm."""

    pixel_size: float
    magnification: float
    image_resolution: tuple[int, int]
    depth_of_field: float = 1.0
    working_distance: float = 1.0

    def validate(self) -> None:
        if self.pixel_size <= 0 or self.magnification <= 0:
            raise ImagingError("pixel size and magnification must be positive")
        if self.image_resolution[0] <= 0 or self.image_resolution[1] <= 0:
            raise ImagingError("image resolution must be positive")
        if self.depth_of_field <= 0 or self.working_distance <= 0:
            raise ImagingError("depth of field and working distance must be positive")


@dataclass(frozen=True)
class OpticsResult:
    resolving_power_um: float          # micrometers per pixel
    fov_mm: tuple[float, float]        # (long, short) millimeters


def resolving_power(spec: CameraSpec) -> float:
    """Micrometers per pixel: pixel size divided by optical magnification."""
    spec.validate()
    return spec.pixel_size / spec.magnification


def field_of_view(spec: CameraSpec) -> tuple[float, float]:
    """Per-axis field of view in millimeters: resolving power times resolution."""
    rp = resolving_power(spec)
    return (rp * spec.image_resolution[0] / 1000.0, rp * spec.image_resolution[1] / 1000.0)


def optics_summary(spec: CameraSpec) -> OpticsResult:
    return OpticsResult(resolving_power(spec), field_of_view(spec))


# Camera/lens sets used on the line: long sides image with the low depth of
# field set, short sides with the high depth of field set.
LOW_DOF_CAMERA = CameraSpec(
    pixel_size=3.45, magnification=0.231, image_resolution=(4096, 2168),
    depth_of_field=4.5, working_distance=200.0,
)
HIGH_DOF_CAMERA = CameraSpec(
    pixel_size=1.67, magnification=0.184, image_resolution=(3860, 2748),
    depth_of_field=20.0, working_distance=132.9,
)


# ---------------------------------------------------------------------------
# Channel arithmetic
# ---------------------------------------------------------------------------

def channel_subtract(img: Image, minuend: str, subtrahend: str) -> Image:
    """Per-pixel saturating channel difference, e.g. R-G; returns a gray image."""
    if img.channels != 3:
        raise ImagingError("channel_subtract needs an RGB image")
    try:
        a = CHANNEL_NAMES[minuend.lower()]
        b = CHANNEL_NAMES[subtrahend.lower()]
    except KeyError as e:
        raise ImagingError(f"unknown channel {e.args[0]!r}") from None
    diff = img.pixels[:, :, a].astype(np.int16) - img.pixels[:, :, b].astype(np.int16)
    return Image(np.maximum(diff, 0).astype(np.uint8)[:, :, None])


def to_gray(img: Image) -> Image:
    """Rec.601 luma; identity for images that are already single-channel."""
    if img.channels == 1:
        return img
    px = img.pixels.astype(np.float64)
    luma = 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]
    return Image(_quantize(luma)[:, :, None])


# ---------------------------------------------------------------------------
# PPM / PGM binary I/O (P6 / P5, maxval 255)
# ---------------------------------------------------------------------------

def write_ppm(img: Image) -> bytes:
    magic = b"P6" if img.channels == 3 else b"P5"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + img.data


def read_ppm(blob: bytes) -> Image:
    """Parse binary P5/P6 with maxval 255; rejects anything else."""
    if len(blob) < 2 or blob[:2] not in (b"P5", b"P6"):
        raise ImagingError("not a binary PGM/PPM (want P5 or P6 magic)")
    channels = 3 if blob[:2] == b"P6" else 1

    # Header: magic then three whitespace-separated integers; '#' starts a
    # comment running to end of line.
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            nl = blob.find(b"\n", pos)
            if nl < 0:
                raise ImagingError("unterminated comment in header")
            pos = nl + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token.isdigit():
            raise ImagingError(f"malformed header token {token!r}")
        fields.append(int(token))
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise ImagingError("missing whitespace after maxval")
    pos += 1  # exactly one whitespace byte separates header from raster

    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImagingError("dimensions must be >= 1")
    if maxval != 255:
        raise ImagingError(f"unsupported maxval {maxval} (only 255)")
    need = width * height * channels
    payload = blob[pos : pos + need]
    if len(payload) != need:
        raise ImagingError(f"truncated payload: need {need} bytes, have {len(payload)}")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Image(px.copy())


def load_image(path) -> Image:
    with open(path, "rb") as f:
        return read_ppm(f.read())


def save_image(img: Image, path) -> None:
    with open(path, "wb") as f:
        f.write(write_ppm(img))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def resize_nearest(img: Image, width: int, height: int) -> Image:
    """Nearest-neighbor resize with half-pixel-center sampling."""
    if width < 1 or height < 1:
        raise ImagingError("target dimensions must be >= 1")
    if width == img.width and height == img.height:
        return img.copy()
    sx = img.width / width
    sy = img.height / height
    xs = np.minimum((np.arange(width) + 0.5) * sx, img.width - 1).astype(np.int64)
    ys = np.minimum((np.arange(height) + 0.5) * sy, img.height - 1).astype(np.int64)
    return Image(img.pixels[np.ix_(ys, xs)])


def resize_bilinear(img: Image, width: int, height: int) -> Image:
    """Bilinear resize, half-pixel-center aligned, clamped at the borders."""
    if width < 1 or height < 1:
        raise ImagingError("target dimensions must be >= 1")
    arr = resize_bilinear_array(img.pixels.astype(np.float64), width, height)
    return Image(_quantize(arr))


def resize_bilinear_array(px: np.ndarray, width: int, height: int) -> np.ndarray:
    """Float bilinear kernel shared by the 8-bit path and the GAN pyramid."""
    h, w = px.shape[0], px.shape[1]
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)

    top = px[y0][:, x0] * (1 - fx)[None, :, None] + px[y0][:, x1] * fx[None, :, None]
    bot = px[y1][:, x0] * (1 - fx)[None, :, None] + px[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
