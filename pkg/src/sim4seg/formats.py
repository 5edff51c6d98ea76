"""Netpbm (P4/P5) readers and writers plus the SVG heatmap writer."""

import numpy as np

from .exceptions import InvalidInputError


def encode_pbm(bits):
    """Binary PBM; set bits are written as 1 (black)."""
    bits = np.asarray(bits, dtype=bool)
    h, w = bits.shape
    packed = np.packbits(bits, axis=1)
    return f"P4\n{w} {h}\n".encode("ascii") + packed.tobytes()


def encode_pgm(values):
    """8-bit binary PGM from a uint8 array or floats in ``[0, 1]``."""
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def _read_header(data, count):
    """Return ``count`` header tokens and the payload offset."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidInputError("truncated netpbm header")
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def decode_pbm(data):
    (magic, w, h), offset = _read_header(data, 3)
    if magic != "P4":
        raise InvalidInputError(f"not a binary PBM (magic {magic!r})")
    w, h = int(w), int(h)
    row_bytes = (w + 7) // 8
    raw = np.frombuffer(data, dtype=np.uint8, count=row_bytes * h, offset=offset)
    return np.unpackbits(raw.reshape(h, row_bytes), axis=1)[:, :w].astype(bool)


def decode_pgm(data):
    (magic, w, h, maxval), offset = _read_header(data, 4)
    if magic != "P5" or int(maxval) != 255:
        raise InvalidInputError("only 8-bit binary PGM is supported")
    w, h = int(w), int(h)
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w).copy()


def write_bytes(path, payload):
    with open(path, "wb") as fh:
        fh.write(payload)


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def heatmap_svg(values, cell=10):
    """Grid of rectangles whose grey level is linear in value between min and max.

    The minimum maps to black, the maximum to white; a constant map is drawn
    mid-grey.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise InvalidInputError("heatmap input must be 2-D")
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    h, w = values.shape
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}" '
        f'viewBox="0 0 {w * cell} {h * cell}">',
    ]
    for r in range(h):
        for c in range(w):
            level = 128 if span == 0 else int(round(255 * (values[r, c] - lo) / span))
            lines.append(
                f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                f'fill="rgb({level},{level},{level})"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
