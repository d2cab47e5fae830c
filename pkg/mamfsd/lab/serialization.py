"""
MAM-FSD Serialization
MFT1 tensor files and MFCK checkpoints

MFT1:  b"MFT1" | u32 rank | rank x u32 dims | row-major little-endian f32 values
MFCK:  b"MFCK" | u32 count | count x (u16 name length | name | MFT1 record)
       [ b"MFOS" | u32 step | u32 count | count x (u16 name length | name | MFT1 record) ]
"""

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Optional, Tuple, Union

import numpy as np

from .base import FormatError

TENSOR_MAGIC = b"MFT1"
CHECKPOINT_MAGIC = b"MFCK"
OPTIMIZER_MAGIC = b"MFOS"

PathLike = Union[str, Path]


# ============================================================================
# MFT1 TENSORS
# ============================================================================

def write_tensor(f: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack('<I', array.ndim))
    if array.ndim:
        f.write(np.asarray(array.shape, dtype='<u4').tobytes())
    f.write(np.ascontiguousarray(array, dtype='<f4').tobytes())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise FormatError(f"file ended unexpectedly while reading {what}")
    return chunk


def read_tensor(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4, "tensor magic") != TENSOR_MAGIC:
        raise FormatError("not an MFT1 tensor record")
    (rank,) = struct.unpack('<I', _read_exact(f, 4, "rank"))
    if rank > 32:
        raise FormatError(f"invalid rank: {rank}")
    dims = tuple(int(d) for d in np.frombuffer(_read_exact(f, 4 * rank, "dims"), dtype='<u4'))
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(f, 4 * count, "values"), dtype='<f4')
    return data.astype(np.float32).reshape(dims)


def save_tensor(path: PathLike, array: np.ndarray) -> None:
    with open(path, 'wb') as f:
        write_tensor(f, array)


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, 'rb') as f:
        array = read_tensor(f)
        if f.read(1):
            raise FormatError(f"trailing bytes after tensor in {path}")
    return array


# ============================================================================
# MFCK CHECKPOINTS
# ============================================================================

@dataclass
class Checkpoint:
    """Named parameter tensors plus optional Adam moments."""

    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    optimizer_step: Optional[int] = None
    optimizer_tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def _write_named(f: BinaryIO, named: Dict[str, np.ndarray]) -> None:
    for name, array in named.items():
        raw = name.encode('utf-8')
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        f.write(struct.pack('<H', len(raw)))
        f.write(raw)
        write_tensor(f, array)


def _read_named(f: BinaryIO, count: int) -> "OrderedDict[str, np.ndarray]":
    named = OrderedDict()
    for _ in range(count):
        (length,) = struct.unpack('<H', _read_exact(f, 2, "name length"))
        name = _read_exact(f, length, "name").decode('utf-8')
        named[name] = read_tensor(f)
    return named


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack('<I', len(checkpoint.tensors)))
    _write_named(buf, checkpoint.tensors)
    if checkpoint.optimizer_step is not None:
        buf.write(OPTIMIZER_MAGIC)
        buf.write(struct.pack('<II', checkpoint.optimizer_step, len(checkpoint.optimizer_tensors)))
        _write_named(buf, checkpoint.optimizer_tensors)
    return buf.getvalue()


def save_checkpoint(path: PathLike, checkpoint: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(checkpoint))


def load_checkpoint(path: PathLike) -> Checkpoint:
    with open(path, 'rb') as f:
        if _read_exact(f, 4, "checkpoint magic") != CHECKPOINT_MAGIC:
            raise FormatError(f"{path} is not an MFCK checkpoint")
        (count,) = struct.unpack('<I', _read_exact(f, 4, "tensor count"))
        checkpoint = Checkpoint(tensors=_read_named(f, count))
        tail = f.read(4)
        if tail:
            if tail != OPTIMIZER_MAGIC:
                raise FormatError(f"unexpected trailing block in {path}")
            step, opt_count = struct.unpack('<II', _read_exact(f, 8, "optimizer header"))
            checkpoint.optimizer_step = step
            checkpoint.optimizer_tensors = _read_named(f, opt_count)
            if f.read(1):
                raise FormatError(f"trailing bytes after optimizer block in {path}")
    return checkpoint


def split_moments(checkpoint: Checkpoint) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Separate ``<param>.m`` / ``<param>.v`` optimizer entries."""
    m, v = {}, {}
    for name, array in checkpoint.optimizer_tensors.items():
        base, _, kind = name.rpartition('.')
        (m if kind == 'm' else v)[base] = array
    return m, v
