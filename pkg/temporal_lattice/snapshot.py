"""
Binary lattice snapshots and operator fixtures.

Snapshot layout, all little-endian:

    header  3 x int64        d, k, v_d
    keys    k x (d+1) int32  row-major
    values  k x v_d float32  row-major

Fixtures pair named snapshot blobs with a JSON manifest so golden tests can
be shared with other implementations.
"""

import json
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from loguru import logger

from .errors import DataFormatError
from .lattice import DEFAULT_SIGMA, SparseLattice
from .utils import optional_typecheck

HEADER_DTYPE = np.dtype("<i8")
KEY_DTYPE = np.dtype("<i4")
VALUE_DTYPE = np.dtype("<f4")

PathLike = Union[str, Path]


def encode_snapshot(keys: np.ndarray, values: np.ndarray) -> bytes:
    keys = np.asarray(keys)
    values = np.asarray(values)
    if keys.ndim != 2 or values.ndim != 2 or keys.shape[0] != values.shape[0]:
        raise DataFormatError(f"Cannot encode keys {keys.shape} with values {values.shape}")
    header = np.array([keys.shape[1] - 1, keys.shape[0], values.shape[1]], dtype=HEADER_DTYPE)
    return header.tobytes() + keys.astype(KEY_DTYPE).tobytes() + values.astype(VALUE_DTYPE).tobytes()


def decode_snapshot(payload: bytes, path: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Parse a snapshot payload into (keys int64, values float32)."""
    if len(payload) < 3 * HEADER_DTYPE.itemsize:
        raise DataFormatError("Snapshot shorter than its header", path=path, offset=len(payload))
    d, k, value_dim = (int(v) for v in np.frombuffer(payload[:24], dtype=HEADER_DTYPE))
    if d < 0 or k < 0 or value_dim < 0:
        raise DataFormatError(f"Invalid snapshot header d={d}, k={k}, v_d={value_dim}", path=path, offset=0)
    key_bytes = k * (d + 1) * KEY_DTYPE.itemsize
    value_bytes = k * value_dim * VALUE_DTYPE.itemsize
    expected = 24 + key_bytes + value_bytes
    if len(payload) != expected:
        raise DataFormatError(
            f"Snapshot size {len(payload)} does not match header (expected {expected} bytes)",
            path=path,
            offset=min(len(payload), expected),
        )
    keys = np.frombuffer(payload, dtype=KEY_DTYPE, count=k * (d + 1), offset=24).reshape(k, d + 1)
    values = np.frombuffer(payload, dtype=VALUE_DTYPE, count=k * value_dim, offset=24 + key_bytes)
    return keys.astype(np.int64), values.reshape(k, value_dim).copy()


@optional_typecheck
def save_snapshot(path: PathLike, lattice: SparseLattice) -> None:
    """Write the keys and values of a lattice in snapshot layout."""
    Path(path).write_bytes(encode_snapshot(lattice.keys, lattice.values))
    logger.debug(f"Wrote lattice snapshot with {len(lattice)} vertices to {path}")


@optional_typecheck
def load_snapshot(path: PathLike, sigma=DEFAULT_SIGMA) -> SparseLattice:
    """Rebuild a lattice from a snapshot; row order is preserved."""
    keys, values = decode_snapshot(Path(path).read_bytes(), path=str(path))
    return SparseLattice.from_keys(keys, sigma=sigma, values=values)


def save_fixture(directory: PathLike, name: str, arrays: Dict[str, np.ndarray], manifest: Optional[dict] = None) -> Path:
    """
    Store an operator fixture: one snapshot-layout blob per array plus a JSON manifest.

    Plain arrays carry no lattice keys: they are written with d = 0, one
    zero key per row, and the array flattened to (rows, cols) values.
    """
    directory = Path(directory) / name
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for array_name, array in arrays.items():
        array = np.asarray(array)
        matrix = array.reshape(array.shape[0] if array.ndim else 1, -1) if array.size else array.reshape(0, 0)
        blob = directory / f"{array_name}.bin"
        blob.write_bytes(encode_snapshot(np.zeros((matrix.shape[0], 1), dtype=np.int64), matrix))
        entries[array_name] = {"file": blob.name, "shape": list(array.shape)}
    document = {"name": name, "arrays": entries, **(manifest or {})}
    (directory / "manifest.json").write_text(json.dumps(document, indent=2))
    logger.debug(f"Wrote fixture '{name}' with {len(entries)} arrays to {directory}")
    return directory


def load_fixture(directory: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    directory = Path(directory)
    document = json.loads((directory / "manifest.json").read_text())
    arrays = {}
    for array_name, entry in document["arrays"].items():
        _, values = decode_snapshot((directory / entry["file"]).read_bytes(), path=entry["file"])
        arrays[array_name] = values.reshape(entry["shape"])
    return arrays, document
