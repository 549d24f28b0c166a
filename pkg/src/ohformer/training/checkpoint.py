"""
Binary checkpoint format (little-endian throughout)::

    b"OHF1"
    u32 version (= 1)
    u32 length, UTF-8 stack text
    u32 count, then per tensor:
        u16 name length, UTF-8 name, u8 rank, rank x u32 extents, f32 values
    u32 count, optimizer buffers in the same encoding
    u64 step
    4 x u64 generator state

Model buffers (BatchNorm running statistics) are stored with the parameters.
Saving writes a temporary file and renames it, so a failed save never leaves
a partial checkpoint behind.
"""

import logging
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from ohformer.errors import CheckpointFormatError, CheckpointVersionError, DataError, OutputError

logger = logging.getLogger(__name__)

MAGIC = b"OHF1"
VERSION = 1

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    spec: str
    params: "OrderedDict[str, np.ndarray]"
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0
    rng_state: Tuple[int, int, int, int] = (0, 0, 0, 0)


def _encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        raw_name = name.encode("utf-8")
        value = np.asarray(value)
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    spec = ckpt.spec.encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(spec)),
        spec,
        _encode_tensors(ckpt.params),
        _encode_tensors(ckpt.optimizer),
        struct.pack("<Q", ckpt.step),
        struct.pack("<4Q", *ckpt.rng_state),
    ])


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, size: int, what: str) -> str:
        start = self.offset
        try:
            return self.take(size, what).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"{what} is not valid UTF-8", start) from None

    def tensors(self, section: str) -> "OrderedDict[str, np.ndarray]":
        (count,) = self.unpack("<I", f"{section} count")
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            start = self.offset
            (name_len,) = self.unpack("<H", f"{section} name length")
            name = self.text(name_len, f"{section} name")
            if name in out:
                raise CheckpointFormatError(f"duplicate {section} tensor {name!r}", start)
            (rank,) = self.unpack("<B", f"rank of {name}")
            shape = self.unpack(f"<{rank}I", f"extents of {name}")
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            values = np.frombuffer(self.take(4 * size, f"values of {name}"), dtype="<f4")
            out[name] = values.astype(np.float32).reshape(shape)
        return out


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Raises:
        CheckpointFormatError: bad magic, truncation, duplicate names or trailing bytes
        CheckpointVersionError: unsupported version
    """
    reader = _Reader(data)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic, not an OHF1 checkpoint", 0)
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(version, len(MAGIC))
    (spec_len,) = reader.unpack("<I", "spec length")
    spec = reader.text(spec_len, "spec")
    params = reader.tensors("parameter")
    optimizer = reader.tensors("optimizer")
    (step,) = reader.unpack("<Q", "step")
    rng_state = reader.unpack("<4Q", "generator state")
    if reader.offset != len(data):
        raise CheckpointFormatError(f"{len(data) - reader.offset} trailing bytes", reader.offset)
    return Checkpoint(spec, params, optimizer, step, tuple(rng_state))


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> Path:
    """
    Raises:
        OutputError: the file cannot be written
    """
    path = Path(path)
    payload = encode_checkpoint(ckpt)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise OutputError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug("saved checkpoint %s (%d bytes, step %d)", path, len(payload), ckpt.step)
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    """
    Raises:
        DataError: the file cannot be read
        CheckpointFormatError: the file is malformed
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(data)
