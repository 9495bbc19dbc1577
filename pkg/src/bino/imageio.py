"""Binary PPM (P6) / PGM (P5) readers and writers, plus dataset manifests.

Only 8-bit binary variants are supported; values are scaled to [0, 1]
floats on read.  Manifests are newline-separated relative paths with left
and right images alternating.
"""

from __future__ import annotations

import os

import numpy as np


class ImageFormatError(ValueError):
    pass


def _read_header_token(f) -> bytes:
    # skip whitespace and '#' comment lines between header fields
    tok = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            raise ImageFormatError("unexpected EOF in header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_image(path: str) -> np.ndarray:
    """Read a P6 PPM (-> 3xHxW) or P5 PGM (-> 1xHxW) as floats in [0,1]."""
    with open(path, "rb") as f:
        magic = _read_header_token(f)
        if magic not in (b"P5", b"P6"):
            raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
        width = int(_read_header_token(f))
        height = int(_read_header_token(f))
        maxval = int(_read_header_token(f))
        if maxval != 255:
            raise ImageFormatError(f"{path}: only 8-bit images supported (maxval={maxval})")
        channels = 3 if magic == b"P6" else 1
        raw = f.read(width * height * channels)
        if len(raw) != width * height * channels:
            raise ImageFormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32) / 255.0


def write_image(path: str, img: np.ndarray) -> None:
    """Write a CxHxW float image in [0,1] as P6 (C=3) or P5 (C=1)."""
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected 1xHxW or 3xHxW, got {img.shape}")
    c, h, w = img.shape
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n255\n".encode())
        f.write(data.transpose(1, 2, 0).tobytes())


def read_manifest(path: str) -> list[tuple[str, str]]:
    """Read a left/right-alternating manifest; paths are relative to it."""
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if len(lines) % 2 != 0:
        raise ImageFormatError(f"{path}: manifest must alternate left/right (odd line count)")
    return [(os.path.join(root, lines[i]), os.path.join(root, lines[i + 1]))
            for i in range(0, len(lines), 2)]
