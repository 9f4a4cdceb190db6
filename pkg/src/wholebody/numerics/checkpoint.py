"""Self-describing named-tensor checkpoint container.

Layout: magic, format version, length-prefixed JSON header (metadata plus
a tensor index with name/dtype/shape/offset/sha256), raw tensor bytes,
then a sha256 footer over everything before it.  Metadata carries whatever
the caller needs to rebuild the model (architecture, normalizer, noise
schedule).
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"WBCK"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name])
        raw = a.tobytes()
        index.append({
            "name": name,
            "dtype": a.dtype.str,
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)
    with open(path, "wb") as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        data = f.read()
    body, footer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != footer:
        raise ValueError("checkpoint footer checksum mismatch")
    if body[:4] != MAGIC:
        raise ValueError("not a checkpoint file")
    version, header_len = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(body[12:12 + header_len].decode())
    blob = body[12 + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ValueError(f"tensor {entry['name']!r} checksum mismatch")
        tensors[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(
            entry["shape"]).copy()
    return tensors, header["meta"]
