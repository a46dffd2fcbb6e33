"""Writer for the .kvtr trace container.

Byte layout (little-endian), independently implemented against the format's
documentation so this package never imports the engine:

    header  "<4s7I": magic b"KVTR", version 1, n_layers, n_heads, head_dim,
                     n_context, n_steps, flags (bit 0: values present)
    keys    float32 [L][H][N][D], C order
    values  float32 [L][H][N][D]           (iff flag bit 0)
    queries float32 [S][L][H][D]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"KVTR"
VERSION = 1
FLAG_HAS_VALUES = 0x1

_HEADER = struct.Struct("<4s7I")


def write_kvtr(
    keys: np.ndarray,
    queries: np.ndarray,
    path: str | Path,
    values: np.ndarray | None = None,
) -> int:
    """Serialize one trace; returns bytes written.

    ``keys`` (and ``values``) must be [L, H, N, D]; ``queries`` [S, L, H, D]
    with matching L, H, D.
    """
    keys = np.ascontiguousarray(keys, dtype="<f4")
    queries = np.ascontiguousarray(queries, dtype="<f4")
    if keys.ndim != 4:
        raise ValueError(f"keys must be 4-d [L, H, N, D], got shape {keys.shape}")
    if queries.ndim != 4:
        raise ValueError(f"queries must be 4-d [S, L, H, D], got shape {queries.shape}")
    n_layers, n_heads, n_context, head_dim = keys.shape
    n_steps = queries.shape[0]
    if queries.shape[1:] != (n_layers, n_heads, head_dim):
        raise ValueError(
            f"queries shape {queries.shape} inconsistent with keys shape {keys.shape}"
        )

    flags = 0
    blobs = [
        _HEADER.pack(MAGIC, VERSION, n_layers, n_heads, head_dim, n_context, n_steps, 0),
        keys.tobytes(),
    ]
    if values is not None:
        values = np.ascontiguousarray(values, dtype="<f4")
        if values.shape != keys.shape:
            raise ValueError(f"values shape {values.shape} != keys shape {keys.shape}")
        flags |= FLAG_HAS_VALUES
        blobs[0] = _HEADER.pack(
            MAGIC, VERSION, n_layers, n_heads, head_dim, n_context, n_steps, flags
        )
        blobs.append(values.tobytes())
    blobs.append(queries.tobytes())

    data = b"".join(blobs)
    Path(path).write_bytes(data)
    return len(data)
