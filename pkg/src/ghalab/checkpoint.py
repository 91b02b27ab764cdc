"""Checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"GHACKPT\\x00"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header
    20+H    ...   payload: raw little-endian C-order tensor bytes

The header holds ``config`` (model configuration), ``head_mask`` (list of 0/1
lists, or null), ``run`` (free-form JSON run state) and ``tensors``: a list of
``{"section", "name", "dtype", "shape", "offset", "nbytes"}`` records whose
``offset`` is relative to the start of the payload. Sections in use are
``params``, ``optimizer.m``, ``optimizer.v`` and ``grouping``. Optimizer
scalars (step, betas, eps) live under ``run.optimizer``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"GHACKPT\x00"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int8": "<i1"}


class CheckpointError(IOError):
    pass


def _encode(tensors):
    records, chunks, offset = [], [], 0
    for section, name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {key} for {section}/{name}")
        raw = arr.astype(_DTYPES[key], copy=False).tobytes()
        records.append({"section": section, "name": name, "dtype": key,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return records, b"".join(chunks)


def write_checkpoint(path, config, tensors, head_mask=None, run=None):
    """Atomically write a checkpoint.

    ``tensors`` is an iterable of ``(section, name, array)``.
    """
    records, payload = _encode(tensors)
    header = {"config": config, "head_mask": head_mask, "run": run or {}, "tensors": records}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + payload
    atomic_write_bytes(path, blob)


def read_checkpoint(path):
    """Return ``(header, {section: {name: array}})``."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 20:
        raise CheckpointError(f"{path}: truncated preamble")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    base = 20 + hlen
    sections = {}
    for rec in header["tensors"]:
        start = base + rec["offset"]
        raw = blob[start:start + rec["nbytes"]]
        if len(raw) != rec["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload at {rec['section']}/{rec['name']}")
        arr = np.frombuffer(raw, dtype=_DTYPES[rec["dtype"]]).astype(rec["dtype"])
        sections.setdefault(rec["section"], {})[rec["name"]] = arr.reshape(rec["shape"])
    return header, sections


def atomic_write_bytes(path, data):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def parameter_hash(model):
    """SHA-256 over parameter names, shapes and raw bytes, in declaration order."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
