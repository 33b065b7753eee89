"""Minimal binary PGM (P5) and PPM (P6) read/write.

Byte output is fully deterministic, which the reproducibility contract
relies on. Only maxval 255 is supported.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM wants a 2-D grayscale array, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM wants an (H, W, 3) array, got shape {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _read_header(fh, magic: bytes) -> tuple[int, int]:
    def token():
        tok = b""
        while True:
            ch = fh.read(1)
            if not ch:
                raise ValueError("truncated netpbm header")
            if ch == b"#":  # comment to end of line
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
                continue
            if ch.isspace():
                if tok:
                    return tok
                continue
            tok += ch

    if token() != magic:
        raise ValueError(f"not a {magic.decode()} file")
    w, h, maxval = int(token()), int(token()), int(token())
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return h, w


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w = _read_header(fh, b"P5")
        data = fh.read(h * w)
    if len(data) != h * w:
        raise ValueError(f"truncated PGM payload in {path}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w = _read_header(fh, b"P6")
        data = fh.read(h * w * 3)
    if len(data) != h * w * 3:
        raise ValueError(f"truncated PPM payload in {path}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
