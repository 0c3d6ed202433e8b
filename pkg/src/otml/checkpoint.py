"""Binary checkpoint format.

All integers are little-endian::

    magic        8 bytes   b"OTMLCKPT"
    version      u32       1
    count        u64       number of tensors
    count times:
        name_len u32, name (UTF-8)
        rank     u32, dims rank x u64
        payload  prod(dims) x float64
    step         u64       training step
    digest_len   u32, digest (ASCII hex SHA-256 of the config text)
    config_len   u32, config text (UTF-8)

The trailer after the tensor table carries the training step and the
configuration the model was built from.
"""

import hashlib
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CorruptPayloadError, HeaderError, VersionError

MAGIC = b"OTMLCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict
    step: int = 0
    digest: str = ""
    config_text: str = ""
    warnings: list = field(default_factory=list)


def config_digest(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def encode_checkpoint(tensors, step=0, config_text=""):
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(tensors))]
    for name, value in tensors.items():
        array = np.array(value, dtype="<f8", order="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes())
    digest = config_digest(config_text).encode("ascii")
    raw_config = config_text.encode("utf-8")
    parts.append(struct.pack("<QI", step, len(digest)) + digest)
    parts.append(struct.pack("<I", len(raw_config)) + raw_config)
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, count, what):
        if count < 0 or self.pos + count > len(self.data):
            raise CorruptPayloadError(f"file truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data, expected_digest=None):
    reader = _Reader(data)
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise HeaderError("bad checkpoint magic")
    reader.pos = len(MAGIC)
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (count,) = reader.unpack("<Q", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I", "name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptPayloadError("tensor name is not valid UTF-8") from None
        (rank,) = reader.unpack("<I", "rank")
        if rank > 8:
            raise CorruptPayloadError(f"implausible tensor rank {rank}")
        dims = reader.unpack(f"<{rank}Q", "dims")
        size = int(np.prod(dims, dtype=np.uint64)) if dims else 1
        if size * 8 > len(data):
            raise CorruptPayloadError(f"tensor {name!r} is larger than the file")
        payload = reader.take(size * 8, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    (step, digest_len) = reader.unpack("<QI", "trailer")
    try:
        digest = reader.take(digest_len, "digest").decode("ascii")
        (config_len,) = reader.unpack("<I", "config length")
        config_text = reader.take(config_len, "config").decode("utf-8")
    except UnicodeDecodeError:
        raise CorruptPayloadError("trailer is not valid text") from None
    if reader.pos != len(data):
        raise CorruptPayloadError(f"{len(data) - reader.pos} unexpected trailing bytes")
    checkpoint = Checkpoint(tensors=tensors, step=step, digest=digest, config_text=config_text)
    if expected_digest is not None and expected_digest != digest:
        message = f"config digest mismatch: checkpoint {digest[:12]}, expected {expected_digest[:12]}"
        checkpoint.warnings.append(message)
        warnings.warn(message, stacklevel=3)
    return checkpoint


def save_checkpoint(path, tensors, step=0, config_text=""):
    """Atomically write ``tensors`` (name -> array) to ``path``."""
    data = encode_checkpoint(tensors, step=step, config_text=config_text)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, expected_digest=None):
    """Read a checkpoint; a digest mismatch warns but still loads."""
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expected_digest=expected_digest)
