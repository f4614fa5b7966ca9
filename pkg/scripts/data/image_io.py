"""
Binary portable pixmap I/O (P6 color images, P5 label and mask maps).

Images live in memory as H x W x 3 float64 arrays in [0, 1] and are stored
with 8-bit quantization; label maps are uint8 class indices with 255 for
IGNORE.
"""

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from scripts.errors import ImageFormatError

logger = logging.getLogger("ImageIO")


def quantize(image):
    """Round [0, 1] values to the 8-bit grid used on disk."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _open(path, mode):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            if img.format != "PPM" or img.mode != mode:
                kind = "P6 color" if mode == "RGB" else "P5 grayscale"
                raise ImageFormatError(f"{path} is not an 8-bit {kind} pixmap (format {img.format}, mode {img.mode})")
            return np.array(img)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"cannot parse {path}: {exc}") from exc


def read_image(path):
    return _open(path, "RGB").astype(np.float64) / 255.0


def write_image(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ImageFormatError(f"expected an H x W x 3 image, got {image.shape}")
    pixels = image if image.dtype == np.uint8 else quantize(image)
    Image.fromarray(pixels).save(path, format="PPM")


def read_label(path):
    return _open(path, "L")


def write_label(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ImageFormatError(f"expected an H x W label map, got {labels.shape}")
    Image.fromarray(labels.astype(np.uint8)).save(path, format="PPM")
