"""Image decoding helpers shared by ingestion and deduplication.

All identity and hashing in the pipeline is defined over *decoded pixels*,
never over container bytes, so re-encoding an image does not change its
identity as long as the pixels survive.
"""

from __future__ import annotations

import hashlib
import io

import numpy as np
from PIL import Image

SUPPORTED_FORMATS = ("PNG", "JPEG", "WebP")

_FORMAT_ALIASES = {"PNG": "PNG", "JPEG": "JPEG", "JPG": "JPEG", "WEBP": "WebP"}


class ImageDecodeError(ValueError):
    """Raised when image bytes cannot be decoded."""


def decode_image(data: bytes) -> Image.Image:
    """Decode image bytes into a PIL image; format must be PNG/JPEG/WebP."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise ImageDecodeError(f"undecodable image: {exc}") from exc
    fmt = _FORMAT_ALIASES.get((img.format or "").upper())
    if fmt is None:
        raise ImageDecodeError(f"unsupported image format: {img.format!r}")
    return img


def canonical_format(img: Image.Image) -> str:
    return _FORMAT_ALIASES[(img.format or "").upper()]


def image_id_of(data: bytes) -> str:
    """Content id: sha256 over decoded RGB pixel bytes plus dimensions.

    Independent of the container encoding; two files with identical pixels
    get the same id regardless of compression settings.
    """
    img = decode_image(data).convert("RGB")
    h = hashlib.sha256()
    h.update(f"{img.width}x{img.height}:RGB:".encode("ascii"))
    h.update(img.tobytes())
    return h.hexdigest()[:32]


def grayscale_pixels(data: bytes) -> np.ndarray:
    """Decoded grayscale pixels as a float64 2-D array in [0, 255].

    Uses the ITU-R 601 luma transform (integer-rounded, as in common
    image libraries), so the result is deterministic across platforms.
    """
    img = decode_image(data).convert("L")
    return np.asarray(img, dtype=np.float64)
