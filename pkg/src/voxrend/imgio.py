"""Tiny readers/writers for the image formats the pipeline emits.

* PPM (P6, 8-bit): linear [0,1] color mapped by round(255*c), no gamma.
* PFM (Pf, single channel): f32 little-endian, scale -1.0, rows stored
  bottom-up per the format convention.  Used for depth and weight maps.
* PGM (P5, 8-bit): class-id maps.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError("ppm expects an (h, w, 3) array")
    h, w = rgb.shape[:2]
    data = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise FormatError(f"not a P6 ppm: magic {magic!r}")
        dims = _read_header_tokens(fh, 3)
        w, h, maxval = (int(t) for t in dims)
        if maxval != 255:
            raise FormatError(f"unsupported ppm maxval {maxval}")
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise FormatError("ppm payload truncated")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_pfm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise FormatError("pfm writer expects an (h, w) array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(img).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise FormatError(f"not a single-channel pfm: magic {magic!r}")
        toks = _read_header_tokens(fh, 3)
        w, h, scale = int(toks[0]), int(toks[1]), float(toks[2])
        count = w * h
        dtype = "<f4" if scale < 0 else ">f4"
        raw = fh.read(count * 4)
    if len(raw) != count * 4:
        raise FormatError("pfm payload truncated")
    img = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return np.flipud(img).astype(np.float64)


def write_pgm(path, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise FormatError("pgm writer expects an (h, w) array")
    if ids.min() < 0 or ids.max() > 255:
        raise FormatError("pgm class ids must fit in a byte")
    h, w = ids.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(ids.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise FormatError(f"not a P5 pgm: magic {magic!r}")
        w, h, maxval = (int(t) for t in _read_header_tokens(fh, 3))
        if maxval != 255:
            raise FormatError(f"unsupported pgm maxval {maxval}")
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise FormatError("pgm payload truncated")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def _read_header_tokens(fh, n: int) -> list[bytes]:
    """Collect n whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    while len(tokens) < n:
        line = fh.readline()
        if not line:
            raise FormatError("truncated header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens[:n]
