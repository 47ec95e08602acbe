"""Minimal binary PGM/PPM reading and writing.

Grayscale rasters are 16-bit ``P5`` (maxval 65535, big-endian samples);
colour output is 8-bit ``P6``.
"""

from __future__ import annotations

import colorsys
import math
from pathlib import Path

import numpy as np

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class RasterError(ValueError):
    pass


def write_pgm16(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise RasterError(f"PGM image must be 2-D, got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 65535):
        raise RasterError("PGM values must lie in [0, 65535]")
    h, w = image.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + image.astype(">u2").tobytes())


def _read_header(data: bytes, path) -> tuple[bytes, list[int], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the samples
    pos += 1
    try:
        return tokens[0], [int(t) for t in tokens[1:]], pos
    except ValueError as exc:
        raise RasterError(f"{path}: malformed header") from exc


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, (w, h, maxval), pos = _read_header(data, path)
    if magic != b"P5":
        raise RasterError(f"{path}: expected P5 magic, got {magic!r}")
    if maxval != 65535:
        raise RasterError(f"{path}: expected maxval 65535, got {maxval}")
    body = data[pos:]
    if len(body) != 2 * w * h:
        raise RasterError(f"{path}: expected {2 * w * h} sample bytes, found {len(body)}")
    return np.frombuffer(body, dtype=">u2").reshape(h, w).astype(np.int64)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise RasterError(f"PPM image must be (H, W, 3), got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, (w, h, maxval), pos = _read_header(data, path)
    if magic != b"P6" or maxval != 255:
        raise RasterError(f"{path}: expected 8-bit P6")
    return np.frombuffer(data[pos : pos + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)


def id_color(instance_id: int) -> tuple[int, int, int]:
    """Deterministic colour per ID; hue steps by the golden ratio, 0 maps to black."""
    if instance_id <= 0:
        return (0, 0, 0)
    hue = (instance_id * _GOLDEN) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
    return (round(r * 255), round(g * 255), round(b * 255))


def colorize(ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    uniq, inverse = np.unique(ids, return_inverse=True)
    palette = np.array([id_color(int(u)) for u in uniq], dtype=np.uint8)
    return palette[inverse.reshape(ids.shape)]
