"""8-bit image I/O (PNG via Pillow, binary PGM/PPM natively) and resizing.

The numeric boundary lives here: images on disk are 8-bit; everything inside
the network is a normalized [0, 1] float tensor.  Quantization happens only
on the way back to 8-bit, rounding half up.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = ["ImageBuffer", "ImageFormatError", "read_image", "write_image",
           "resize_bilinear", "to_grayscale", "DatasetManifest"]

# Rec. 601 luma weights, used for all gray conversions
_LUMA = np.array([0.299, 0.587, 0.114])


class ImageFormatError(ValueError):
    """Unsupported file format, bit depth, or channel layout."""


@dataclass
class ImageBuffer:
    """8-bit pixels as (h, w, c) uint8 with c in {1, 3}."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3 or px.shape[2] not in (1, 3) or px.dtype != np.uint8:
            raise ImageFormatError(
                f"pixels must be (h, w, 1|3) uint8, got shape {px.shape} "
                f"dtype {px.dtype}")
        self.pixels = px

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    def to_tensor(self) -> np.ndarray:
        """Normalized (1, c, h, w) float32 in [0, 1]."""
        return (self.pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]

    @classmethod
    def from_tensor(cls, tensor: np.ndarray) -> "ImageBuffer":
        """Quantize a (1, c, h, w) or (c, h, w) [0, 1] tensor, round half up."""
        t = np.asarray(tensor)
        if t.ndim == 4:
            if t.shape[0] != 1:
                raise ValueError(f"expected batch of 1, got {t.shape}")
            t = t[0]
        if t.ndim != 3:
            raise ValueError(f"expected (c, h, w), got shape {t.shape}")
        q = np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        return cls(q.transpose(1, 2, 0))

    def to_float(self) -> np.ndarray:
        """(h, w) or (h, w, 3) float64 on the 8-bit scale."""
        px = self.pixels.astype(np.float64)
        return px[..., 0] if self.channels == 1 else px


def to_grayscale(buffer: ImageBuffer) -> ImageBuffer:
    """Rec. 601 luma conversion; gray input passes through unchanged."""
    if buffer.channels == 1:
        return buffer
    gray = buffer.pixels.astype(np.float64) @ _LUMA
    return ImageBuffer(np.floor(gray + 0.5).astype(np.uint8)[..., None])


def _read_pnm(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        data = fh.read()

    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PNM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval

    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(
            f"{path}: only binary PGM (P5) / PPM (P6) are supported, got {magic!r}")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise ImageFormatError(f"{path}: pixel data truncated")
    return ImageBuffer(np.frombuffer(raw, dtype=np.uint8).reshape(
        height, width, channels).copy())


def _write_pnm(buffer: ImageBuffer, path):
    magic = b"P5" if buffer.channels == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (buffer.width, buffer.height))
        fh.write(buffer.pixels.tobytes())


def read_image(path) -> ImageBuffer:
    """Decode an 8-bit grayscale or RGB image (PNG, PGM, PPM)."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        return _read_pnm(path)
    if ext != ".png":
        raise ImageFormatError(f"unsupported image format {ext!r} for {path}")
    try:
        img = Image.open(path)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    if img.mode not in ("L", "RGB"):
        raise ImageFormatError(
            f"{path}: only 8-bit grayscale/RGB PNG supported, got mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.uint8)
    return ImageBuffer(arr if arr.ndim == 3 else arr[..., None])


def write_image(buffer: ImageBuffer, path):
    """Encode losslessly; the format follows the file extension."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        _write_pnm(buffer, path)
        return
    if ext != ".png":
        raise ImageFormatError(f"unsupported image format {ext!r} for {path}")
    px = buffer.pixels
    img = Image.fromarray(px[..., 0] if buffer.channels == 1 else px)
    img.save(path, format="PNG")


def resize_bilinear(buffer: ImageBuffer, width: int, height: int) -> ImageBuffer:
    """Corner-aligned bilinear resize.

    Sample s maps to source coordinate ``s * (size_in - 1) / (size_out - 1)``
    (0 when the output has a single sample), so the corner pixels of input
    and output coincide exactly.
    """
    if width < 1 or height < 1:
        raise ValueError(f"target must be >= 1x1, got {width}x{height}")
    if width == buffer.width and height == buffer.height:
        return ImageBuffer(buffer.pixels.copy())
    src = buffer.pixels.astype(np.float64)

    def coords(n_out, n_in):
        if n_out == 1:
            return np.zeros(1)
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    ys = coords(height, buffer.height)
    xs = coords(width, buffer.width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, buffer.height - 1)
    x1 = np.minimum(x0 + 1, buffer.width - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return ImageBuffer(np.floor(out + 0.5).astype(np.uint8))


@dataclass
class DatasetManifest:
    """Named, ordered list of image paths with an optional resize target."""

    name: str
    paths: list = field(default_factory=list)
    resize: tuple | None = None  # (width, height)

    @classmethod
    def from_file(cls, path) -> "DatasetManifest":
        """Text manifest: first line ``name=...``, optional ``resize=WxH``,
        then one image path per line (relative to the manifest)."""
        base = os.path.dirname(os.path.abspath(path))
        name = os.path.basename(path)
        resize = None
        paths = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if line.startswith("name="):
                    name = line[5:]
                elif line.startswith("resize="):
                    w, h = line[7:].lower().split("x")
                    resize = (int(w), int(h))
                else:
                    paths.append(os.path.join(base, line))
        return cls(name=name, paths=paths, resize=resize)

    def load(self):
        """Yield (path, ImageBuffer), resized when a target is set."""
        for p in self.paths:
            buf = read_image(p)
            if self.resize is not None:
                buf = resize_bilinear(buf, self.resize[0], self.resize[1])
            yield p, buf
