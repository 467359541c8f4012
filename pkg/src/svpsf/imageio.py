"""Binary PGM (P5) and PFM (Pf) readers and writers.

PFM is written little-endian (negative scale) with rows stored bottom to
top, as the format defines. 16-bit PGM samples are big-endian per Netpbm.
"""

import re

import numpy as np

from .core import FormatError

_HEADER_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _read_tokens(buf, count):
    tokens, pos = [], 0
    for _ in range(count):
        m = _HEADER_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    # exactly one whitespace byte separates header and raster
    return tokens, pos + 1


def write_pgm(path, image, maxval=255):
    """Write ``image`` (values in [0, 1]) as 8- or 16-bit binary PGM."""
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    q = np.rint(np.clip(arr, 0.0, 1.0) * maxval)
    raw = q.astype(np.uint8 if maxval == 255 else ">u2").tobytes()
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(raw)


def write_pgm_raw(path, values, maxval=255):
    """Write integer sample values unchanged (no rescaling)."""
    arr = np.asarray(values)
    h, w = arr.shape
    dtype = np.uint8 if maxval < 256 else ">u2"
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(arr.astype(dtype).tobytes())


def read_pgm(path, raw=False):
    """Read a binary PGM; returns floats in [0, 1] unless ``raw`` is set."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, start = _read_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    n = w * h * dtype.itemsize
    if len(buf) - start < n:
        raise FormatError(f"{path}: truncated raster")
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=start).reshape(h, w)
    if raw:
        return data.astype(np.int64)
    return data.astype(np.float64) / maxval


def write_pfm(path, image):
    """Write a single-channel float32 PFM (little-endian)."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError("PFM image must be 2-D")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        fh.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def read_pfm(path):
    """Read a single-channel PFM into a float64 array (top row first)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, start = _read_tokens(buf, 4)
    if tokens[0] != b"Pf":
        raise FormatError(f"{path}: not a grayscale PFM (magic {tokens[0]!r})")
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    if len(buf) - start < 4 * w * h:
        raise FormatError(f"{path}: truncated raster")
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=start).reshape(h, w)
    return data[::-1].astype(np.float64)
