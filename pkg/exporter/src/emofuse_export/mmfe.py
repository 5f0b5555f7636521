"""Writer for the MMFE feature binary, the interface to the training package.

Layout (little-endian): magic "MMFE", version u16=1, dtype u8=0 (float32),
ndim u8=2, 8 reserved bytes, dims 2xu32 (T, D), payload T*D float32 rows.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMFE"
VERSION = 1
HEADER = struct.Struct("<4sHBB8x")
DIMS = struct.Struct("<II")


def write_mmfe(data: np.ndarray, path: str | Path) -> None:
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError(f"MMFE payload must be a non-empty TxD matrix, got {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("MMFE payload contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, 0, 2))
        fh.write(DIMS.pack(*data.shape))
        fh.write(data.astype("<f4", copy=False).tobytes())
