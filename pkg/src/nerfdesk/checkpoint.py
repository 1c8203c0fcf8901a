"""Bit-exact binary checkpoints for named float64 tensors.

Layout (all integers little-endian):

    magic b"DTNF" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | rank u32 |
                extents u64 each | row-major float64 payload

Tensors are written sorted by name, so save -> load -> save reproduces the
file byte for byte.
"""

import struct

import numpy as np

MAGIC = b"DTNF"
VERSION = 1


def save_checkpoint(path, tensors):
    """Write {name: ndarray-like} to ``path``."""
    items = sorted(tensors.items())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(items)))
        for name, value in items:
            arr = np.asarray(value, dtype=np.float64)
            if arr.ndim:
                arr = np.ascontiguousarray(arr)  # 0-d would be promoted to 1-d
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
            f.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint back into {name: float64 ndarray}."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", data, off) if rank else ()
        off += 8 * rank
        n = 1
        for ext in shape:
            n *= ext
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        out[name] = arr.reshape(shape).astype(np.float64)
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return out
