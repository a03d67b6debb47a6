"""Binary tensor encoding shared by corpus clips and checkpoints.

Tensor record (all integers uint32 little-endian)::

    ndim | dim_0 ... dim_{ndim-1} | prod(dims) float64 little-endian, row-major

Clip file: 8-byte magic ``MFCLIP01`` then two records, features [T, d] and
motion [T, L, 3].

Checkpoint file: 8-byte magic ``MFCKPT01``, uint32 header length, UTF-8
JSON header (sorted keys, no whitespace), uint32 tensor count, then for
each tensor: uint32 name length, UTF-8 name, tensor record. Tensors are
written in the order given, which is the ParameterSet order followed by the
adapters (``lora.<base>.B`` / ``lora.<base>.A``).
"""

import io
import json
import struct

import numpy as np

__all__ = [
    "FormatError",
    "CLIP_MAGIC",
    "CHECKPOINT_MAGIC",
    "write_tensor",
    "read_tensor",
    "encode_clip",
    "decode_clip",
    "encode_checkpoint",
    "decode_checkpoint",
]

CLIP_MAGIC = b"MFCLIP01"
CHECKPOINT_MAGIC = b"MFCKPT01"
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    pass


def write_tensor(buf, arr):
    arr = np.asarray(arr, dtype="<f8")
    buf.write(_U32.pack(arr.ndim))
    for d in arr.shape:
        buf.write(_U32.pack(d))
    buf.write(np.ascontiguousarray(arr).tobytes(order="C"))


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated data: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(buf):
    (ndim,) = _U32.unpack(_read_exact(buf, 4))
    shape = tuple(_U32.unpack(_read_exact(buf, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8").astype(np.float64)
    return arr.reshape(shape)


def encode_clip(features, motion):
    buf = io.BytesIO()
    buf.write(CLIP_MAGIC)
    write_tensor(buf, features)
    write_tensor(buf, motion)
    return buf.getvalue()


def decode_clip(blob):
    buf = io.BytesIO(blob)
    if buf.read(8) != CLIP_MAGIC:
        raise FormatError("not a clip file")
    features = read_tensor(buf)
    motion = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after clip records")
    return features, motion


def encode_checkpoint(header, tensors):
    """``header`` is a JSON-able dict, ``tensors`` an ordered name -> array map."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(_U32.pack(len(head)))
    buf.write(head)
    buf.write(_U32.pack(len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(_U32.pack(len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    return buf.getvalue()


def decode_checkpoint(blob):
    buf = io.BytesIO(blob)
    if buf.read(8) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file")
    (n,) = _U32.unpack(_read_exact(buf, 4))
    header = json.loads(_read_exact(buf, n).decode("utf-8"))
    (count,) = _U32.unpack(_read_exact(buf, 4))
    tensors = {}
    for _ in range(count):
        (k,) = _U32.unpack(_read_exact(buf, 4))
        name = _read_exact(buf, k).decode("utf-8")
        tensors[name] = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint tensors")
    return header, tensors
