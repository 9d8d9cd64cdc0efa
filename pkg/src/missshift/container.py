"""Versioned binary container for named float64 arrays, plus a YAML sidecar.

Layout::

    magic   8 bytes   b"MSHIFT\\x00\\x01"
    version uint16    little endian
    hlen    uint32    length of the JSON header in bytes
    header  hlen      JSON: {"arrays": [{"name", "shape", "dtype"}], "attrs": {...}}
    payload           each array, row-major, little-endian, in header order

Boolean arrays are stored as float64 0/1 and restored by dtype tag; ``NaN``
is preserved bit-for-bit.
"""

import json
import struct
from pathlib import Path

import numpy as np
import yaml

from .errors import FormatError

MAGIC = b"MSHIFT\x00\x01"
VERSION = 1


def save_arrays(path, arrays, attrs=None):
    path = Path(path)
    entries, blobs = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = "bool" if arr.dtype == np.bool_ else "float64"
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": kind})
        blobs.append(data.tobytes())
    header = json.dumps({"arrays": entries, "attrs": attrs or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path):
    """Return ``(arrays, attrs)`` from a container written by :func:`save_arrays`."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<HI", raw, off)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    off += 6
    try:
        header = json.loads(raw[off : off + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    off += hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
        if entry["dtype"] == "bool":
            arr = arr.astype(bool)
        arrays[entry["name"]] = arr
    return arrays, header["attrs"]


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".meta.yaml")


def write_sidecar(path, meta):
    with open(sidecar_path(path), "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=False)


def read_sidecar(path):
    p = sidecar_path(path)
    if not p.exists():
        return {}
    with open(p) as fh:
        return yaml.safe_load(fh) or {}
