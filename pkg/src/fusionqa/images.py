"""Image container plus binary PPM (P6) reading and writing.

PPM is the one image format here: trivially bit-exact and dependency-free.
Pixels are stored channel-last as float32 in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Image:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"image pixels must be (H, W, 3), got {px.shape}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def _read_ppm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comment lines between header tokens
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError(f"ppm: truncated header at byte offset {start}")
    return buf[start:pos], pos


def load_image_ppm(path) -> Image:
    """Parse a binary P6 PPM with maxval 255 into a normalized Image."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P6":
        raise ValueError(f"ppm {path}: expected magic 'P6', got {buf[:2]!r}")
    pos = 2
    width_tok, pos = _read_ppm_token(buf, pos)
    height_tok, pos = _read_ppm_token(buf, pos)
    maxval_tok, pos = _read_ppm_token(buf, pos)
    width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    if maxval != 255:
        raise ValueError(f"ppm {path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise ValueError(
            f"ppm {path}: truncated payload at byte offset {pos + len(payload)} "
            f"(need {need} bytes, have {len(payload)})"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(arr.astype(np.float32) / 255.0)


def save_image_ppm(img: Image, path):
    """Write a binary P6 PPM; inverse of load_image_ppm up to quantization."""
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())
