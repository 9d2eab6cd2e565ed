"""Float RGB images and their two on-disk forms (8-bit PNG, raw float32).

Pixels are float32 in [0, 1], shape (height, width, 3), rows top to bottom.
The raw format is lossless: magic 'RGBF', little-endian u32 width and height,
then the float32 pixel block in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PilImage

RAW_MAGIC = b"RGBF"
_RAW_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class Image:
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {a.shape}")
        object.__setattr__(self, "data", a)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def to_uint8(self) -> np.ndarray:
        return np.round(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: Image, path) -> None:
    PilImage.fromarray(image.to_uint8(), mode="RGB").save(Path(path), format="PNG")


def load_png(path) -> Image:
    with PilImage.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return Image(arr)


def save_raw(image: Image, path) -> None:
    with open(Path(path), "wb") as f:
        f.write(_RAW_HEADER.pack(RAW_MAGIC, image.width, image.height))
        f.write(np.ascontiguousarray(image.data, dtype="<f4").tobytes())


def load_raw(path) -> Image:
    blob = Path(path).read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise ValueError(f"{path}: truncated raw image header")
    magic, width, height = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw float image (magic {magic!r})")
    expected = _RAW_HEADER.size + width * height * 12
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_RAW_HEADER.size)
    return Image(data.reshape(height, width, 3).copy())
