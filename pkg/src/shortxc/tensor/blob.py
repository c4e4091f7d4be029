"""Named-tensor blob files.

Layout (all integers little-endian)::

    b"SXCT"  u32 version  u32 meta_len  meta (UTF-8 JSON)  u32 n_entries
    per entry: u32 name_len  name (UTF-8)  u32 ndim  u64[ndim] shape  f32[prod(shape)] row-major

Entries are written in the order given, so identical inputs give identical bytes.
"""
import io
import json
import struct

import numpy as np

from ..errors import ParseError

MAGIC = b"SXCT"
VERSION = 1


def dumps(tensors, meta=None):
    """Serialize an ordered mapping ``name -> array`` (values cast to float32)."""
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4", order="C")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes(order="C"))
    return buf.getvalue()


def loads(raw):
    """Inverse of :func:`dumps`: returns ``(dict name -> float32 array, meta)``."""
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ParseError(f"tensor blob truncated at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ParseError("not a tensor blob (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ParseError(f"unsupported tensor blob version {version}")
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float32)
    if pos != len(view):
        raise ParseError(f"tensor blob has {len(view) - pos} trailing bytes")
    return out, meta


def save(path, tensors, meta=None):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, meta))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
