"""Feature-map dump files for offline analysis.

Layout::

    magic    8 bytes   b"GHAFMD\\x00\\x00"
    version  u32 LE    1
    hlen     u64 LE    length of the JSON header
    header   JSON      {"records": [{layer, layer_name, head, kind, dims, offset}], "meta": {...}}
    payload            float64 little-endian values, one block per record

One record holds one head's feature map of one kind, exactly as captured
(``v``: batch x keys x head_dim, ``a``: batch x queries x keys,
``o``: batch x queries x head_dim).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .checkpoint import atomic_write_bytes
from .grouping import FM_KINDS

MAGIC = b"GHAFMD\x00\x00"
VERSION = 1


class DumpError(ValueError):
    pass


def write_fm_dump(path, fms, kinds=FM_KINDS, meta=None):
    """Write per-head feature maps of every layer in ``fms`` (LayerFeatureMaps list)."""
    records, blocks, offset = [], [], 0
    for li, fm in enumerate(fms):
        for kind in kinds:
            arr = np.asarray(fm.get(kind).data, dtype="<f8")
            for h in range(arr.shape[1]):
                block = np.ascontiguousarray(arr[:, h]).tobytes()
                records.append({"layer": li, "layer_name": fm.name, "head": h, "kind": kind,
                                "dims": list(arr[:, h].shape), "offset": offset})
                blocks.append(block)
                offset += len(block)
    header = json.dumps({"records": records, "meta": meta or {}}, sort_keys=True).encode()
    data = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blocks)
    atomic_write_bytes(path, data)
    return len(records)


def read_fm_dump(path):
    """Return ``(records, meta)``; every record carries its array under ``"values"``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise DumpError(f"{path}: not a feature-map dump")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise DumpError(f"{path}: unsupported version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    out = []
    for rec in header["records"]:
        n = int(np.prod(rec["dims"]))
        start = base + rec["offset"]
        vals = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(rec["dims"])
        out.append({**rec, "values": vals.copy()})
    return out, header["meta"]
