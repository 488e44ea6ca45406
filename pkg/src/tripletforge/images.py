"""8-bit image buffers, PNG/PPM interchange, and content-addressed stores.

Pixels are interleaved uint8, gray (1 channel) or RGB (3 channels).
Content references are lowercase hex SHA-256 digests of the encoded file
bytes, so a buffer hashes identically no matter which process produced it.
"""

from __future__ import annotations

import hashlib
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage


@dataclass(frozen=True)
class ImageBuffer:
    """Immutable row-major 8-bit image, shape (height, width, channels)."""

    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) pixel array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image dimensions must be >= 1")
        if px.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {px.dtype}")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))

    def as_float(self) -> np.ndarray:
        """Pixels as float64 in [0, 255]."""
        return self.pixels.astype(np.float64)


def from_float(values: np.ndarray) -> ImageBuffer:
    """Quantize a float array in [0, 255] to uint8 (round half to even, clamp)."""
    q = np.clip(np.rint(values), 0, 255).astype(np.uint8)
    return ImageBuffer(q)


def luma(image: ImageBuffer) -> np.ndarray:
    """Rec.601 luma as float64 (h, w); gray images pass through."""
    px = image.as_float()
    if image.channels == 1:
        return px[:, :, 0]
    return 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]


# --- codecs ----------------------------------------------------------------

def encode_ppm(image: ImageBuffer) -> bytes:
    """Binary PPM (P6) for RGB, PGM (P5) for gray. Byte-deterministic."""
    magic = b"P6" if image.channels == 3 else b"P5"
    header = b"%s\n%d %d\n255\n" % (magic, image.width, image.height)
    return header + image.pixels.tobytes()


def decode_ppm(data: bytes) -> ImageBuffer:
    tokens = []
    pos = 0
    # header = magic, width, height, maxval; '#' starts a comment
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported netpbm magic {magic!r}")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    raw = data[pos : pos + width * height * channels]
    if len(raw) != width * height * channels:
        raise ValueError("truncated PPM pixel data")
    px = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
    return ImageBuffer(px.copy())


def encode_png(image: ImageBuffer) -> bytes:
    mode = "RGB" if image.channels == 3 else "L"
    arr = image.pixels if image.channels == 3 else image.pixels[:, :, 0]
    buf = io.BytesIO()
    _PILImage.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> ImageBuffer:
    img = _PILImage.open(io.BytesIO(data))
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if img.mode not in ("1", "I;16", "I", "L") else "L")
    arr = np.asarray(img, dtype=np.uint8)
    return ImageBuffer(arr)


def encode_image(image: ImageBuffer, fmt: str) -> bytes:
    if fmt == "ppm":
        return encode_ppm(image)
    if fmt == "png":
        return encode_png(image)
    raise ValueError(f"unsupported image format {fmt!r} (expected 'png' or 'ppm')")


def load_image(path: str | Path) -> ImageBuffer:
    data = Path(path).read_bytes()
    if data[:2] in (b"P5", b"P6"):
        return decode_ppm(data)
    return decode_png(data)


def save_image(image: ImageBuffer, path: str | Path) -> None:
    path = Path(path)
    fmt = "ppm" if path.suffix.lower() in (".ppm", ".pgm") else "png"
    path.write_bytes(encode_image(image, fmt))


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def image_hash(image: ImageBuffer, fmt: str = "ppm") -> str:
    """Content reference of a buffer: SHA-256 of its encoded file bytes."""
    return content_hash(encode_image(image, fmt))


# --- stores ----------------------------------------------------------------

class ImageStore:
    """Resolves refs (paths or content hashes) to buffers and persists new ones."""

    def put(self, image: ImageBuffer) -> str:
        raise NotImplementedError

    def resolve(self, ref: str) -> ImageBuffer:
        raise NotImplementedError


class MemoryStore(ImageStore):
    """In-memory content-addressed store; refs are hashes of PPM encodings."""

    def __init__(self):
        self._buffers: dict[str, ImageBuffer] = {}

    def put(self, image: ImageBuffer) -> str:
        ref = image_hash(image, "ppm")
        self._buffers[ref] = image
        return ref

    def resolve(self, ref: str) -> ImageBuffer:
        if ref in self._buffers:
            return self._buffers[ref]
        if os.path.exists(ref):
            return load_image(ref)
        raise KeyError(f"unknown image ref {ref!r}")


class DirectoryStore(ImageStore):
    """Content-addressed files under a root directory.

    put() writes `<sha256>.<fmt>` atomically; resolve() accepts either a
    hash present in the root or a plain file path.
    """

    def __init__(self, root: str | Path, fmt: str = "png"):
        if fmt not in ("png", "ppm"):
            raise ValueError(f"unsupported store format {fmt!r}")
        self.root = Path(root)
        self.fmt = fmt
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, ref: str) -> Path:
        return self.root / f"{ref}.{self.fmt}"

    def put(self, image: ImageBuffer) -> str:
        data = encode_image(image, self.fmt)
        ref = content_hash(data)
        dest = self.path_for(ref)
        if not dest.exists():
            fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, dest)
            finally:
                if os.path.exists(tmp):
                    os.unlink(tmp)
        return ref

    def resolve(self, ref: str) -> ImageBuffer:
        candidate = self.path_for(ref)
        if candidate.exists():
            return load_image(candidate)
        if os.path.exists(ref):
            return load_image(ref)
        raise KeyError(f"unknown image ref {ref!r}")


# --- bundled test content ---------------------------------------------------

def synthetic_photo(width: int = 256, height: int = 192) -> ImageBuffer:
    """Deterministic photograph-like test image.

    Smooth low-frequency chroma, textured luma (gradients, sinusoids,
    hash-based grain) and a few hard edges. Pure function of (width,
    height): no RNG involved, so it is bit-identical everywhere.
    """
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    u = x / max(width - 1, 1)
    v = y / max(height - 1, 1)

    base = 126 + 70 * np.sin(2.1 * np.pi * u + 0.7) * np.cos(1.3 * np.pi * v)
    texture = (
        18 * np.sin(2 * np.pi * (7.0 * u + 3.0 * v))
        + 12 * np.sin(2 * np.pi * (2.5 * u - 9.0 * v) + 1.1)
        + 7 * np.sin(2 * np.pi * (17.0 * u * v + 0.3))
    )
    # integer hash grain: cheap, deterministic fine detail
    idx = (y.astype(np.int64) * 92821 + x.astype(np.int64) * 68917 + 12345) & 0xFFFFFFFF
    idx = (idx ^ (idx >> 13)) * 1274126177 & 0xFFFFFFFF
    grain = ((idx >> 8) % 17).astype(np.float64) - 8.0

    lum = base + texture + grain

    # hard-edged shapes for gradient structure
    disc = (x - 0.3 * width) ** 2 + (y - 0.4 * height) ** 2 < (0.12 * min(width, height)) ** 2
    lum = np.where(disc, lum + 45, lum)
    bar = (x > 0.65 * width) & (x < 0.72 * width)
    lum = np.where(bar, lum - 55, lum)

    # slowly varying chroma so 4:2:0 style subsampling loses little
    cr = 24 * np.sin(2 * np.pi * (0.8 * u + 0.2 * v))
    cb = 20 * np.cos(2 * np.pi * (0.3 * u - 0.6 * v) + 0.4)
    r = lum + 1.402 * cr
    g = lum - 0.344136 * cb - 0.714136 * cr
    b = lum + 1.772 * cb
    return from_float(np.stack([r, g, b], axis=-1))
