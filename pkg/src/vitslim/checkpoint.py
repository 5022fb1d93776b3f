"""Binary checkpoint format, little-endian throughout.

Layout:
    magic      4 bytes  b"VSCK"
    version    u32      (currently 1)
    meta_len   u32      followed by meta_len bytes of UTF-8 JSON metadata
    count      u32      number of tensors, then per tensor:
        name_len u32, name bytes (UTF-8), rank u32, dims (u64 each),
        raw float32 data (row-major)

Round trips are bit exact. The metadata section carries auxiliary JSON such
as a supernet skeleton description; an empty dict is written when absent.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import VitslimError

MAGIC = b"VSCK"
VERSION = 1


class CheckpointError(VitslimError):
    pass


def save_tensors(path, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            # np.asarray keeps rank (ascontiguousarray would promote 0-d to 1-d);
            # tobytes() below always emits row-major data
            arr = np.asarray(arr, dtype="<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(arr.tobytes())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(b)}")
    return b


def load_tensors(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, meta_len).decode("utf-8")) if meta_len else {}
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank)) if rank else ()
            size = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(_read_exact(f, 4 * size), dtype="<f4").reshape(dims)
            tensors[name] = data.copy()
    return tensors, meta
