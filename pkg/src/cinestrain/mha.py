"""MetaImage (.mha) reader/writer for the subset this project uses.

Single-file images only (ElementDataFile = LOCAL), binary little-endian
payload, element types MET_FLOAT / MET_SHORT (read as float32) / MET_UCHAR
(label masks).  Geometry is written as decimal text with 9 significant
digits, which round-trips float32-exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import MhaParseError, MhaPayloadError
from .geometry import LabelMask, Volume3D

_DTYPES = {
    "MET_FLOAT": np.dtype("<f4"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("u1"),
}


def _fmt(values) -> str:
    return " ".join(f"{float(v):.9g}" for v in np.asarray(values).ravel())


def _parse_floats(header, key, count):
    try:
        vals = [float(tok) for tok in header[key].split()]
    except (KeyError, ValueError) as e:
        raise MhaParseError(key) from e
    if len(vals) != count:
        raise MhaParseError(key, f"expected {count} values, got {len(vals)}")
    return np.asarray(vals, dtype=np.float64)


def _parse_ints(header, key, count):
    try:
        vals = [int(tok) for tok in header[key].split()]
    except (KeyError, ValueError) as e:
        raise MhaParseError(key) from e
    if len(vals) != count:
        raise MhaParseError(key, f"expected {count} values, got {len(vals)}")
    return vals


def write_mha(obj, path) -> None:
    """Write a Volume3D (MET_FLOAT) or LabelMask (MET_UCHAR)."""
    if isinstance(obj, LabelMask):
        elem_type, payload = "MET_UCHAR", obj.labels
    else:
        elem_type, payload = "MET_FLOAT", obj.data
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        # TransformMatrix row i is the world direction of grid axis i
        f"TransformMatrix = {_fmt(obj.direction.T)}",
        f"Offset = {_fmt(obj.origin)}",
        f"ElementSpacing = {_fmt(obj.spacing)}",
        f"DimSize = {obj.dims[0]} {obj.dims[1]} {obj.dims[2]}",
        f"ElementType = {elem_type}",
        "ElementDataFile = LOCAL",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(np.ravel(payload, order="F").astype(_DTYPES[elem_type]).tobytes())


def read_mha(path):
    """Read a .mha file; MET_UCHAR becomes a LabelMask, else a Volume3D."""
    header = {}
    with open(path, "rb") as f:
        while True:
            line = f.readline()
            if not line:
                raise MhaParseError("ElementDataFile", "header ended before data section")
            try:
                text = line.decode("ascii").strip()
            except UnicodeDecodeError as e:
                raise MhaParseError("header", "non-ASCII bytes in header") from e
            if not text:
                continue
            key, sep, value = text.partition("=")
            if not sep:
                raise MhaParseError(key.strip() or "header", "line is not 'Key = Value'")
            header[key.strip()] = value.strip()
            if key.strip() == "ElementDataFile":
                break
        payload = f.read()

    ndims = header.get("NDims")
    if ndims != "3":
        raise MhaParseError("NDims", f"only NDims = 3 is supported, got {ndims!r}")
    if header.get("BinaryData", "True").lower() != "true":
        raise MhaParseError("BinaryData", "only binary payloads are supported")
    if header.get("BinaryDataByteOrderMSB", "False").lower() not in ("false",):
        raise MhaParseError("BinaryDataByteOrderMSB", "big-endian payloads unsupported")
    if header.get("CompressedData", "False").lower() != "false":
        raise MhaParseError("CompressedData", "compressed payloads unsupported")
    if header.get("ElementDataFile") != "LOCAL":
        raise MhaParseError("ElementDataFile", "only ElementDataFile = LOCAL is supported")

    dims = _parse_ints(header, "DimSize", 3)
    spacing = _parse_floats(header, "ElementSpacing", 3)
    origin = _parse_floats(header, "Offset", 3)
    direction = _parse_floats(header, "TransformMatrix", 9).reshape(3, 3).T

    elem_type = header.get("ElementType")
    if elem_type not in _DTYPES:
        raise MhaParseError("ElementType", f"unsupported element type {elem_type!r}")
    dtype = _DTYPES[elem_type]
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise MhaPayloadError(
            f"payload is {len(payload)} bytes, DimSize implies {expected}"
        )
    raw = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    if elem_type == "MET_UCHAR":
        return LabelMask(tuple(dims), spacing, origin, direction, raw)
    return Volume3D(tuple(dims), spacing, origin, direction, raw.astype(np.float32))
