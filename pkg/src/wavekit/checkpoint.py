"""Binary checkpoint container.

Layout: the ASCII magic ``WAVEKIT1`` followed by one entry per parameter
until end of file. Each entry is

    u32 name length (little-endian) | name bytes (UTF-8) |
    u32 rank | u32 * rank dims | float64 * prod(dims) values (little-endian)

Entries are written sorted by name so identical states produce identical
files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"WAVEKIT1"


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    state: dict[str, np.ndarray] = {}
    offset = len(MAGIC)
    total = len(blob)
    while offset < total:
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        state[name] = values.astype(np.float64).reshape(dims)
    return state
