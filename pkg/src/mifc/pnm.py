"""Binary PNM image I/O (P5 grayscale, P6 RGB), maxval 255 only.

Grayscale images are uint8 arrays of shape (H, W); RGB images (H, W, 3).
Writes use the canonical header ``P5\\n<w> <h>\\n255\\n`` (resp. P6) followed
by raw bytes, so identical images produce identical files.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def _read_token(blob: bytes, off: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments, then collect one token
    n = len(blob)
    while off < n:
        ch = blob[off : off + 1]
        if ch == b"#":
            while off < n and blob[off : off + 1] != b"\n":
                off += 1
        elif ch.isspace():
            off += 1
        else:
            break
    start = off
    while off < n and not blob[off : off + 1].isspace() and blob[off : off + 1] != b"#":
        off += 1
    if start == off:
        raise FormatError("unexpected end of PNM header")
    return blob[start:off], off


def parse_image(blob: bytes) -> np.ndarray:
    if len(blob) < 2:
        raise FormatError("file too short for a PNM header")
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}; expected P5 or P6")
    off = 2
    fields = []
    for _ in range(3):
        tok, off = _read_token(blob, off)
        if not tok.isdigit():
            raise FormatError(f"non-numeric PNM header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"invalid PNM dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"unsupported PNM maxval {maxval}; only 255 is handled")
    off += 1  # exactly one whitespace byte separates header and raster
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raster = blob[off : off + need]
    if len(raster) < need:
        raise FormatError(f"PNM raster truncated: expected {need} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def read_image(path) -> np.ndarray:
    """Read a P5 (returns (H, W)) or P6 (returns (H, W, 3)) file."""
    with open(path, "rb") as fh:
        return parse_image(fh.read())


def image_bytes(image: np.ndarray) -> bytes:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise FormatError("PNM images must be uint8")
    if arr.ndim == 2:
        magic = b"P5"
        h, w = arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
        h, w = arr.shape[:2]
    else:
        raise FormatError(f"cannot encode array of shape {arr.shape} as PNM")
    header = magic + b"\n" + f"{w} {h}".encode() + b"\n255\n"
    return header + np.ascontiguousarray(arr).tobytes()


def write_image(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(image_bytes(image))
