# backend/core/tensorio.py
# CFTENSR binary tensor container: single tensors and named-tensor bundles.

import io
import json
import logging
from pathlib import Path

import numpy as np

from core.errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b"CFTENSR\0"
VERSION = 1

# dtype code -> little-endian numpy dtype
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8"), 2: np.dtype("u1")}


def _dtype_code(arr):
    if arr.dtype.kind == "f":
        return 0
    if arr.dtype.kind in ("i", "b") or (arr.dtype.kind == "u" and arr.dtype.itemsize > 1):
        return 1
    if arr.dtype == np.uint8:
        return 2
    raise DataError(f"Unsupported tensor dtype {arr.dtype}")


def encode_tensor(array):
    arr = np.asarray(array)
    code = _dtype_code(arr)
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code])
    header = np.array([VERSION, arr.ndim, *arr.shape], dtype="<u4").tobytes()
    return MAGIC + header + bytes([code]) + payload.tobytes()


def _read_exact(stream, n, what):
    buf = stream.read(n)
    if len(buf) != n:
        raise DataError(f"Truncated CFTENSR record while reading {what}")
    return buf


def decode_tensor(stream):
    """Read one record from a binary stream. Returns None at a clean end of stream."""
    magic = stream.read(len(MAGIC))
    if not magic:
        return None
    if magic != MAGIC:
        raise DataError("Bad CFTENSR magic")
    version, rank = np.frombuffer(_read_exact(stream, 8, "header"), dtype="<u4")
    if version != VERSION:
        raise DataError(f"Unsupported CFTENSR version {version}")
    dims = tuple(int(d) for d in np.frombuffer(_read_exact(stream, 4 * int(rank), "dims"), dtype="<u4"))
    code = _read_exact(stream, 1, "dtype")[0]
    if code not in DTYPES:
        raise DataError(f"Unknown CFTENSR dtype code {code}")
    dtype = DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    raw = _read_exact(stream, count * dtype.itemsize, "payload")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def write_tensor(path, array):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))


def read_tensor(path):
    try:
        with open(path, "rb") as fh:
            arr = decode_tensor(fh)
    except FileNotFoundError as e:
        raise DataError(f"Tensor file not found: {path}") from e
    if arr is None:
        raise DataError(f"Empty tensor file: {path}")
    return arr


# -------------------------------------------------------------------
# Named bundles: a uint8 JSON index record, then one record per name
# -------------------------------------------------------------------
def encode_bundle(tensors, meta=None):
    names = list(tensors)
    index = json.dumps({"names": names, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(encode_tensor(np.frombuffer(index, dtype=np.uint8)))
    for name in names:
        out.write(encode_tensor(tensors[name]))
    return out.getvalue()


def decode_bundle(stream):
    index = decode_tensor(stream)
    if index is None or index.dtype != np.uint8 or index.ndim != 1:
        raise DataError("CFTENSR bundle is missing its index record")
    try:
        info = json.loads(index.tobytes().decode("utf-8"))
        names = info["names"]
    except (ValueError, KeyError) as e:
        raise DataError("CFTENSR bundle index is not valid JSON") from e
    tensors = {}
    for name in names:
        arr = decode_tensor(stream)
        if arr is None:
            raise DataError(f"CFTENSR bundle ends before tensor '{name}'")
        tensors[name] = arr
    return tensors, info.get("meta", {})


def write_bundle(path, tensors, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_bundle(tensors, meta))
    logger.debug("Wrote bundle %s (%s)", path, ", ".join(tensors))


def read_bundle(path):
    try:
        with open(path, "rb") as fh:
            return decode_bundle(fh)
    except FileNotFoundError as e:
        raise DataError(f"Bundle file not found: {path}") from e
