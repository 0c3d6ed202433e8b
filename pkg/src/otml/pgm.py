"""Binary portable graymap (P5) reading and writing.

Header: ``P5``, width, height and maxval as ASCII decimals separated by
whitespace (``#`` comments allowed), then exactly one whitespace byte and
the raster. Samples are one byte when maxval < 256 and two big-endian
bytes otherwise.
"""

import os

import numpy as np

from .exceptions import CorruptPayloadError, HeaderError


def _read_header(data):
    fields = []
    pos = 0
    if data[:2] != b"P5":
        raise HeaderError(f"not a binary PGM (magic {data[:2]!r})")
    pos = 2
    while len(fields) < 3:
        if pos >= len(data):
            raise HeaderError("header ends before width, height and maxval")
        byte = data[pos : pos + 1]
        if byte.isspace():
            pos += 1
        elif byte == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
                pos += 1
            token = data[start:pos]
            if not token.isdigit():
                raise HeaderError(f"invalid header token {token!r}")
            fields.append(int(token))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise HeaderError("missing whitespace after maxval")
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise HeaderError(f"invalid geometry {width}x{height} or maxval {maxval}")
    return width, height, maxval, pos + 1


def decode_pgm(data):
    width, height, maxval, offset = _read_header(data)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    payload = data[offset : offset + expected]
    if len(payload) < expected:
        raise CorruptPayloadError(f"raster truncated: {len(payload)} of {expected} bytes")
    raster = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return (raster.astype(np.float64) / maxval)[None]


def load_pgm(path):
    """Read a P5 file into a ``(1, h, w)`` float array scaled to ``[0, 1]``."""
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def encode_pgm(image, maxval=255):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in 1..65535")
    height, width = image.shape
    values = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    return header + values.astype(dtype).tobytes()


def save_pgm(path, image, maxval=255):
    """Write a ``(1, h, w)`` or ``(h, w)`` image in ``[0, 1]`` as P5."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_pgm(image, maxval))
    os.replace(tmp, path)
