"""Grayscale image container, Netpbm decode/encode, resizing, blurring, overlays.

Images are carried as real-valued intensities in [0, 1]; quantization to 8-bit
happens only when a file is written. Binary PGM (P5) and PPM (P6) are the
supported on-disk formats, with 8-bit or 16-bit (big-endian) samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

# ITU-R BT.601 luma weights for RGB -> gray conversion.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    """Malformed PGM/PPM data; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Immutable single-channel raster with intensities in [0, 1].

    `data` is a read-only (height, width) float64 array, row-major.
    """

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dimensions must be >= 1, got {self.width}x{self.height}")
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.shape != (self.height, self.width):
            raise ValueError(
                f"data shape {arr.shape} does not match dimensions "
                f"{self.height}x{self.width}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities must be finite")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"intensities must lie in [0, 1], got range [{lo}, {hi}]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "GrayImage":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
        return cls(width=arr.shape[1], height=arr.shape[0], data=arr)

    def allclose(self, other: "GrayImage", atol: float = 0.0) -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and np.allclose(self.data, other.data, rtol=0.0, atol=atol)
        )


@dataclass(frozen=True)
class Overlay:
    """A point or line to rasterize on top of an image.

    Coordinates are sub-pixel (x, y) positions; anything outside the image is
    clamped into [0, width) x [0, height) before drawing. `intensity` is the
    gray value the overlay is drawn with.
    """

    kind: str  # "point" or "line"
    coordinates: tuple  # point: ((x, y),); line: ((x0, y0), (x1, y1))
    intensity: float = 1.0

    def __post_init__(self):
        if self.kind not in ("point", "line"):
            raise ValueError(f"unknown overlay kind {self.kind!r}")
        n_expected = 1 if self.kind == "point" else 2
        if len(self.coordinates) != n_expected:
            raise ValueError(f"{self.kind} overlay needs {n_expected} coordinate(s)")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("overlay intensity must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Netpbm decoding / encoding


def _parse_header(buf: bytes):
    """Parse 'P5|P6 <w> <h> <maxval>' with # comments; return fields + payload offset."""
    if len(buf) < 2:
        raise ImageFormatError("file too short for a PGM/PPM magic number", 0)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}, expected P5 or P6", 0)

    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comments between tokens
        while pos < len(buf):
            c = buf[pos : pos + 1]
            if c.isspace():
                pos += 1
            elif c == b"#":
                nl = buf.find(b"\n", pos)
                if nl < 0:
                    raise ImageFormatError("unterminated comment in header", pos)
                pos = nl + 1
            else:
                break
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise ImageFormatError("expected an unsigned integer in header", start)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("expected single whitespace after maxval", pos)
    pos += 1

    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid dimensions {width}x{height}", 2)
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"maxval {maxval} out of range [1, 65535]", 2)
    return magic, width, height, maxval, pos


def load_image(path) -> GrayImage:
    """Decode a binary PGM (P5) or PPM (P6) file into a GrayImage.

    Color input is reduced with BT.601 luma; samples are divided by the
    file's maxval. 8-bit and 16-bit (big-endian) maxvals are both accepted.

    Raises OSError if the file cannot be read and ImageFormatError (with the
    offending byte offset) if the content is malformed or truncated.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, width, height, maxval, pos = _parse_header(buf)

    channels = 1 if magic == b"P5" else 3
    bytes_per_sample = 1 if maxval < 256 else 2
    expected = width * height * channels * bytes_per_sample
    if len(buf) - pos < expected:
        raise ImageFormatError(
            f"truncated payload: expected {expected} bytes, found {len(buf) - pos}",
            len(buf),
        )

    dtype = np.uint8 if bytes_per_sample == 1 else np.dtype(">u2")
    raw = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=pos)
    samples = raw.astype(np.float64) / float(maxval)
    if channels == 3:
        rgb = samples.reshape(height, width, 3)
        gray = rgb @ np.array(LUMA_WEIGHTS)
    else:
        gray = samples.reshape(height, width)
    # luma of in-range samples can exceed 1 only by rounding noise
    return GrayImage.from_array(np.clip(gray, 0.0, 1.0))


def save_image(img: GrayImage, path) -> None:
    """Write a GrayImage as an 8-bit binary PGM (P5) file."""
    quantized = np.rint(img.data * 255.0).astype(np.uint8)
    header = f"P5 {img.width} {img.height} 255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantized.tobytes())


# ---------------------------------------------------------------------------
# Geometry and filtering


def resize_bilinear(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    """Resample to (out_w, out_h) with center-aligned bilinear interpolation.

    Source coordinate for output pixel i is (i + 0.5) * src / dst - 0.5,
    clamped to the image border.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target dimensions must be >= 1, got {out_w}x{out_h}")
    if (out_w, out_h) == (img.width, img.height):
        return img
    out = _resize_bilinear_array(img.data, out_w, out_h)
    return GrayImage.from_array(np.clip(out, 0.0, 1.0))


def _axis_coords(n_out: int, n_src: int):
    coords = (np.arange(n_out) + 0.5) * (n_src / n_out) - 0.5
    coords = np.clip(coords, 0.0, n_src - 1.0)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = coords - lo
    return lo, hi, frac


def _resize_bilinear_array(data: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    x0, x1, fx = _axis_coords(out_w, data.shape[1])
    y0, y1, fy = _axis_coords(out_h, data.shape[0])
    top = data[y0][:, x0] * (1.0 - fx) + data[y0][:, x1] * fx
    bot = data[y1][:, x0] * (1.0 - fx) + data[y1][:, x1] * fx
    return top * (1.0 - fy)[:, None] + bot * fy[:, None]


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian of radius ceil(4*sigma), normalized to sum 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(4.0 * sigma)
    ks = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(ks * ks) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_blur_array(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filtering of a raw array, clamp-to-edge borders."""
    kernel = gaussian_kernel1d(sigma).astype(data.dtype, copy=False)
    out = correlate1d(data, kernel, axis=0, mode="nearest")
    return correlate1d(out, kernel, axis=1, mode="nearest")


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Gaussian-blur a GrayImage (separable sampled kernel, radius ceil(4*sigma))."""
    out = gaussian_blur_array(img.data, sigma)
    return GrayImage.from_array(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Visualization


def _clamp_point(x: float, y: float, width: int, height: int):
    cx = min(max(x, 0.0), math.nextafter(float(width), 0.0))
    cy = min(max(y, 0.0), math.nextafter(float(height), 0.0))
    return cx, cy


def _draw_point(canvas: np.ndarray, x: float, y: float, value: float) -> None:
    h, w = canvas.shape
    px, py = int(round(x)), int(round(y))
    canvas[max(py - 1, 0) : min(py + 2, h), max(px - 1, 0) : min(px + 2, w)] = value


def _draw_line(canvas: np.ndarray, p0, p1, value: float) -> None:
    x0, y0 = p0
    x1, y1 = p1
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    ts = np.linspace(0.0, 1.0, max(n, 2))
    xs = np.rint(x0 + ts * (x1 - x0)).astype(np.intp)
    ys = np.rint(y0 + ts * (y1 - y0)).astype(np.intp)
    xs = np.clip(xs, 0, canvas.shape[1] - 1)
    ys = np.clip(ys, 0, canvas.shape[0] - 1)
    canvas[ys, xs] = value


def save_visualization(img: GrayImage, overlays, path) -> None:
    """Rasterize overlays onto a copy of `img` and write it as a P5 file.

    Out-of-bounds overlay coordinates are clamped, never an error. The input
    image is left unmodified.
    """
    canvas = img.data.copy()
    for ov in overlays:
        pts = [_clamp_point(x, y, img.width, img.height) for x, y in ov.coordinates]
        if ov.kind == "point":
            _draw_point(canvas, pts[0][0], pts[0][1], ov.intensity)
        else:
            _draw_line(canvas, pts[0], pts[1], ov.intensity)
    save_image(GrayImage.from_array(canvas), path)
