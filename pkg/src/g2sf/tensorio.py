"""Binary tensor container used for every on-disk array artifact.

Layout: 8-byte magic ``G2SFTNS1``, a little-endian u32 header length, a UTF-8
JSON header, then the payload as little-endian IEEE-754 float32 in C order.
The header always carries ``shape`` (list of dims), ``dtype`` (``"f32le"``)
and ``order`` (``"C"``); producers add purpose keys such as ``modality`` or
``kind``. Headers are canonical JSON (sorted keys, no whitespace) so equal
tensors serialize to byte-identical files.

``read_tensor`` also accepts NPY v1.0 files holding little-endian float32
C-order arrays, for interoperability with external feature extractors.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"G2SFTNS1"
_NPY_MAGIC = b"\x93NUMPY"

__all__ = ["MAGIC", "write_tensor", "read_tensor"]


def _canonical_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_tensor(path, array, extra=None):
    """Write ``array`` (any float shape, cast to f32) to ``path``."""
    array = np.ascontiguousarray(array, dtype=np.float32)
    if array.size == 0:
        raise FormatError(f"refusing to write empty tensor of shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise FormatError("refusing to write non-finite tensor payload")
    header = {"shape": list(array.shape), "dtype": "f32le", "order": "C"}
    if extra:
        header.update(extra)
    blob = _canonical_header(header)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(array.tobytes(order="C"))


def read_tensor(path):
    """Read a container (or NPY v1.0 f32 array) and return (array, header)."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(_NPY_MAGIC)] == _NPY_MAGIC:
        return _read_npy(path, raw)
    if raw[:8] != MAGIC:
        raise FormatError(f"bad magic {raw[:8]!r} in {path}", offset=0)
    if len(raw) < 12:
        raise FormatError(f"truncated header in {path}", offset=len(raw))
    (header_len,) = struct.unpack("<I", raw[8:12])
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise FormatError(f"truncated header JSON in {path}", offset=len(raw))
    try:
        header = json.loads(raw[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"undecodable header in {path}: {exc}", offset=12) from exc
    for key in ("shape", "dtype", "order"):
        if key not in header:
            raise FormatError(f"header missing {key!r} in {path}", offset=12)
    if header["dtype"] != "f32le" or header["order"] != "C":
        raise FormatError(f"unsupported dtype/order {header['dtype']}/{header['order']}", offset=12)
    shape = tuple(int(d) for d in header["shape"])
    if any(d <= 0 for d in shape):
        raise FormatError(f"non-positive dimension in shape {shape}", offset=12)
    count = int(np.prod(shape))
    payload = raw[header_end:]
    if len(payload) != 4 * count:
        raise FormatError(
            f"payload is {len(payload)} bytes, expected {4 * count} for shape {shape}",
            offset=header_end + min(len(payload), 4 * count),
        )
    array = np.frombuffer(payload, dtype="<f4").reshape(shape)
    bad = np.flatnonzero(~np.isfinite(array))
    if bad.size:
        raise FormatError(
            f"non-finite payload value at flat index {bad[0]}",
            offset=header_end + 4 * int(bad[0]),
        )
    return array.copy(), header


def _read_npy(path, raw):
    try:
        array = np.load(path)
    except ValueError as exc:
        raise FormatError(f"unreadable NPY file {path}: {exc}") from exc
    if array.dtype != np.dtype("<f4"):
        raise FormatError(f"NPY dtype {array.dtype} is not little-endian float32")
    if not array.flags["C_CONTIGUOUS"]:
        raise FormatError("NPY array is not C-order")
    if not np.all(np.isfinite(array)):
        bad = np.flatnonzero(~np.isfinite(array))
        raise FormatError(f"non-finite NPY payload value at flat index {bad[0]}")
    header = {"shape": list(array.shape), "dtype": "f32le", "order": "C", "source": "npy"}
    return array, header
