"""Binary matrix files and checkpoint archives.

Matrix container: an 8-byte little-endian header (uint32 rows, uint32 cols)
followed by float32 row-major payload. Feature files on disk use exactly this
layout.

Checkpoint archive: a ZIP holding one matrix container per tensor under
``tensors/`` plus a ``manifest.json`` listing tensor names, true shapes, and
free-form metadata. Entries are stored uncompressed with pinned timestamps so
identical contents serialize to identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<II")
# Earliest timestamp a ZIP entry can carry; pinned for byte-stable archives.
_EPOCH = (1980, 1, 1, 0, 0, 0)


class TensorFormatError(ValueError):
    pass


def matrix_to_bytes(arr: np.ndarray) -> bytes:
    if arr.ndim != 2:
        raise TensorFormatError(f"matrix container holds 2-d arrays, got shape {arr.shape}")
    data = np.ascontiguousarray(arr, dtype="<f4")
    rows, cols = data.shape
    return _HEADER.pack(rows, cols) + data.tobytes(order="C")


def matrix_from_bytes(buf: bytes, *, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TensorFormatError(f"{name}: truncated header ({len(buf)} bytes)")
    rows, cols = _HEADER.unpack_from(buf)
    expected = _HEADER.size + 4 * rows * cols
    if len(buf) != expected:
        raise TensorFormatError(
            f"{name}: payload size {len(buf)} does not match header {rows}x{cols}"
        )
    flat = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
    return flat.reshape(rows, cols).copy()


def write_matrix(path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(matrix_to_bytes(arr))


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    return matrix_from_bytes(path.read_bytes(), name=str(path))


def _as_matrix(arr: np.ndarray) -> tuple[np.ndarray, list[int]]:
    shape = list(arr.shape)
    if arr.ndim == 0:
        return arr.reshape(1, 1), shape
    if arr.ndim == 1:
        return arr.reshape(1, -1), shape
    if arr.ndim == 2:
        return arr, shape
    return arr.reshape(arr.shape[0], -1), shape


def save_archive(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write tensors plus metadata as one deterministic ZIP archive."""
    names = sorted(tensors)
    manifest = {
        "meta": meta,
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, payload)
        for n in names:
            mat, _ = _as_matrix(np.asarray(tensors[n], dtype=np.float32))
            info = zipfile.ZipInfo(f"tensors/{n}", date_time=_EPOCH)
            zf.writestr(info, matrix_to_bytes(mat))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint archive not found: {path}")
    with zipfile.ZipFile(path) as zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise TensorFormatError(f"{path}: archive has no manifest.json") from None
        tensors: dict[str, np.ndarray] = {}
        for item in manifest["tensors"]:
            name, shape = item["name"], tuple(item["shape"])
            mat = matrix_from_bytes(zf.read(f"tensors/{name}"), name=f"{path}:{name}")
            if int(np.prod(shape)) != mat.size:
                raise TensorFormatError(f"{path}:{name}: manifest shape {shape} != payload")
            tensors[name] = mat.reshape(shape)
    return tensors, manifest["meta"]
