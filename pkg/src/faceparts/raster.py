"""Minimal raster I/O: binary PPM (P6) and PGM (P5), maxval 255.

Other formats (PNG, JPEG) are read through Pillow when it is installed;
the loader contract is the same either way: images come back as uint8
numpy arrays, HxWx3 for color and HxW for grayscale.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import IoFailure, MissingImage

_PNM_EXTS = {".ppm", ".pgm"}


def _read_pnm_header(data: bytes, path: str) -> tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval; returns them plus payload offset."""
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            c = data[pos : pos + 1]
            if c == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IoFailure(f"{path}: truncated header")
        return data[start:pos]

    magic = next_token()
    width = int(next_token())
    height = int(next_token())
    maxval = int(next_token())
    pos += 1  # single whitespace byte terminates the header
    return magic, width, height, maxval, pos


def load_image(path: str) -> np.ndarray:
    """Load a raster as uint8; HxWx3 for P6/color, HxW for P5."""
    ext = os.path.splitext(path)[1].lower()
    if ext not in _PNM_EXTS:
        return _load_via_pillow(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as err:
        raise MissingImage(str(err)) from err
    magic, width, height, maxval, offset = _read_pnm_header(data, path)
    if magic not in (b"P6", b"P5"):
        raise IoFailure(f"{path}: unsupported magic {magic!r}")
    if maxval != 255:
        raise IoFailure(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = data[offset : offset + expected]
    if len(payload) != expected:
        raise IoFailure(f"{path}: expected {expected} pixel bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3).copy()
    return arr.reshape(height, width).copy()


def save_image(path: str, image: np.ndarray) -> None:
    """Write uint8 HxWx3 as P6 or HxW as P5 (chosen by array shape)."""
    if image.dtype != np.uint8:
        raise IoFailure(f"{path}: expected uint8 pixels, got {image.dtype}")
    ext = os.path.splitext(path)[1].lower()
    if ext not in _PNM_EXTS:
        return _save_via_pillow(path, image)
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise IoFailure(f"{path}: unsupported shape {image.shape}")
    h, w = image.shape[:2]
    try:
        with open(path, "wb") as fh:
            fh.write(magic + b"\n%d %d\n255\n" % (w, h))
            fh.write(np.ascontiguousarray(image).tobytes())
    except OSError as err:
        raise IoFailure(str(err)) from err


def _load_via_pillow(path: str) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as err:
        raise MissingImage(
            f"{path}: non-PNM formats need Pillow installed"
        ) from err
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as err:
        raise MissingImage(str(err)) from err


def _save_via_pillow(path: str, image: np.ndarray) -> None:
    try:
        from PIL import Image
    except ImportError as err:
        raise IoFailure(f"{path}: non-PNM formats need Pillow installed") from err
    try:
        Image.fromarray(image).save(path)
    except OSError as err:
        raise IoFailure(str(err)) from err
