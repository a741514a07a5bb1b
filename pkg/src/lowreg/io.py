"""VOL1 volume files and CSV tables.

A VOL1 file is a UTF-8 text header, one ``key value...`` pair per line,
terminated by a blank line and followed by the raw little-endian payload::

    magic VOL1
    dims 96 96 96
    spacing 1 1 1
    dtype f32
    order x-fastest
    channels 3          (displacement fields only)

Multi-channel payloads interleave the channels per voxel.
All writes go to a temporary file that is renamed into place.
"""

import csv
import io
import os
import tempfile

import numpy as np

from .volume import DDF, LabelMap, Volume

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolFormatError(ValueError):
    pass


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    return repr(float(x)) if not float(x).is_integer() else str(int(x))


def encode_vol(data, spacing=(1.0, 1.0, 1.0), dtype="f32"):
    """Serialize a 3-D array (or (nx, ny, nz, c) array) to VOL1 bytes."""
    arr = np.asarray(data)
    if arr.ndim == 4:
        channels = arr.shape[-1]
        dims = arr.shape[:3]
        # channel fastest, then x, y, z
        payload = np.moveaxis(arr, -1, 0).ravel(order="F")
    elif arr.ndim == 3:
        channels = 1
        dims = arr.shape
        payload = arr.ravel(order="F")
    else:
        raise ValueError(f"cannot store an array of shape {arr.shape} as VOL1")
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    if dtype == "u8":
        if payload.size and (payload.min() < 0 or payload.max() > 255):
            raise ValueError("u8 payload out of range")
    lines = [
        "magic VOL1",
        "dims " + " ".join(str(int(n)) for n in dims),
        "spacing " + " ".join(_fmt(s) for s in spacing),
        f"dtype {dtype}",
        "order x-fastest",
    ]
    if channels != 1:
        lines.append(f"channels {channels}")
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    return header + payload.astype(_DTYPES[dtype]).tobytes()


def decode_vol(raw):
    """Parse VOL1 bytes into ``(array, spacing, dtype)``."""
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise VolFormatError("missing blank line after VOL1 header")
    header = {}
    for line in raw[:sep].decode("utf-8").splitlines():
        parts = line.split()
        if parts:
            header[parts[0]] = parts[1:]
    if header.get("magic") != ["VOL1"]:
        raise VolFormatError("not a VOL1 file")
    try:
        dims = tuple(int(v) for v in header["dims"])
        spacing = tuple(float(v) for v in header.get("spacing", ["1", "1", "1"]))
        dtype = header["dtype"][0]
    except (KeyError, IndexError, ValueError) as exc:
        raise VolFormatError(f"malformed VOL1 header: {exc}") from None
    if header.get("order", ["x-fastest"]) != ["x-fastest"]:
        raise VolFormatError("only x-fastest order is supported")
    if dtype not in _DTYPES or len(dims) != 3:
        raise VolFormatError(f"unsupported dtype or dims: {dtype}, {dims}")
    channels = int(header.get("channels", ["1"])[0])
    payload = np.frombuffer(raw[sep + 2:], dtype=_DTYPES[dtype])
    expected = channels * dims[0] * dims[1] * dims[2]
    if payload.size != expected:
        raise VolFormatError(f"payload has {payload.size} values, expected {expected}")
    if channels == 1:
        arr = payload.reshape(dims, order="F")
    else:
        arr = np.moveaxis(payload.reshape((channels,) + dims, order="F"), 0, -1)
    return np.array(arr), spacing, dtype


def write_vol(path, obj, dtype=None):
    """Write a Volume, LabelMap, DDF or bare array as VOL1."""
    spacing = getattr(obj, "spacing", (1.0, 1.0, 1.0))
    data = getattr(obj, "data", obj)
    if dtype is None:
        dtype = "u8" if isinstance(obj, LabelMap) or np.asarray(data).dtype == np.uint8 else "f32"
    atomic_write_bytes(path, encode_vol(data, spacing, dtype))


def read_raw(path):
    with open(path, "rb") as fh:
        return decode_vol(fh.read())


def read_volume(path):
    arr, spacing, _ = read_raw(path)
    if arr.ndim != 3:
        raise VolFormatError(f"{path} holds a multi-channel field, not a scalar volume")
    return Volume(arr.astype(np.float64), spacing)


def read_labels(path):
    arr, spacing, _ = read_raw(path)
    if arr.ndim != 3:
        raise VolFormatError(f"{path} is not a label map")
    return LabelMap(arr, spacing)


def read_ddf(path):
    arr, spacing, _ = read_raw(path)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise VolFormatError(f"{path} is not a 3-channel displacement field")
    return DDF(arr.astype(np.float64), spacing)


# ---------------------------------------------------------------------------
# CSV

def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def format_csv(columns, rows):
    """RFC 4180 CSV text with a header row; dict or sequence rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(columns)
    for row in rows:
        values = [row[c] for c in columns] if isinstance(row, dict) else list(row)
        writer.writerow([_cell(v) for v in values])
    return buf.getvalue()


def write_csv(path, columns, rows):
    atomic_write_bytes(path, format_csv(columns, rows).encode("utf-8"))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_trace_csv(path, trace):
    write_csv(path, trace.COLUMNS, trace.rows())
