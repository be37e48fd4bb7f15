"""Writers for the downstream toolkit's wire formats.

The extractor talks to the similarity toolkit only through files: the
``.lsim`` leaf-matrix container and the ``.meta.jsonl`` row metadata.
Both writers are byte-deterministic.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

PathLike = Union[str, Path]

_MAGIC = b"LSIM"
_VERSION = 1
# magic, version, u64 n_samples, u32 n_trees, u8 leaf width, 3 reserved zeros
_HEADER = struct.Struct("<4sIQIB3s")


class ExportError(Exception):
    pass


def write_leaf_matrix(leaves: np.ndarray, path: PathLike) -> None:
    """Serialize an N x T int matrix of leaf indices, little-endian.

    The element width is 2 bytes when every index fits 16 bits, else 4;
    indices beyond 32 bits are refused.
    """
    arr = np.asarray(leaves)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ExportError(f"leaf matrix must be a non-empty 2-D array, got shape {arr.shape}")
    if arr.dtype.kind not in ("i", "u"):
        raise ExportError(f"leaf indices must be integers, got dtype {arr.dtype}")
    lo, hi = int(arr.min()), int(arr.max())
    if lo < 0:
        raise ExportError("leaf indices must be non-negative")
    if hi >= 2**32:
        raise ExportError(f"leaf index {hi} exceeds the 32-bit container width")
    width = 2 if hi < 2**16 else 4
    n, t = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, n, t, width, b"\x00\x00\x00"))
        fh.write(np.ascontiguousarray(arr, dtype=f"<u{width}").tobytes())


def synth_sha256(row: int, features: np.ndarray) -> str:
    """Stable placeholder identity for feature rows without real hashes."""
    h = hashlib.sha256()
    h.update(str(row).encode())
    h.update(b":")
    h.update(np.ascontiguousarray(features, dtype=np.float64).tobytes())
    return h.hexdigest()


def write_meta_jsonl(
    path: PathLike,
    n_rows: int,
    shas: Sequence[str],
    labels: Sequence[int],
    subsets: Sequence[str],
    appeared: Optional[Sequence[Optional[str]]] = None,
) -> None:
    if not (len(shas) == len(labels) == len(subsets) == n_rows):
        raise ExportError("metadata column lengths disagree with the row count")
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(n_rows):
            fh.write(
                json.dumps(
                    {
                        "row": i,
                        "sha256": shas[i],
                        "label": int(labels[i]),
                        "subset": subsets[i],
                        "appeared": appeared[i] if appeared is not None else None,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def read_meta_jsonl(path: PathLike) -> list:
    """Minimal reader for the row-metadata sidecar (dicts, not rich types)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj.get("row") != len(rows):
                raise ExportError(f"line {lineno}: rows must be the ordered prefix 0..N-1")
            rows.append(obj)
    return rows
