"""Versioned checkpoint container shared by every trained model.

Single file: magic "CKPT1", u32 header length, JSON header (kind,
architecture descriptor, training metadata, tensor table), then raw
little-endian f32 blobs, then a CRC-32 trailer over header+blobs.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from ..errors import StoreCorruptionError

MAGIC = b"CKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path: str, kind: str, descriptor: dict,
                    tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    table = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "descriptor": descriptor,
        "metadata": metadata or {},
        "tensors": table,
    }).encode()
    body = header + b"".join(blobs)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(body)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path: str) -> tuple[str, dict, dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:5] != MAGIC:
        raise StoreCorruptionError(f"{path}: not a CKPT1 checkpoint")
    (header_len,) = struct.unpack("<I", raw[5:9])
    body = raw[9:-4]
    (crc_stored,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise StoreCorruptionError(f"{path}: checkpoint checksum mismatch")
    header = json.loads(body[:header_len])
    blob = body[header_len:]
    tensors = {}
    for t in header["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(t["shape"])) if t["shape"] else 1,
                            offset=t["offset"])
        tensors[t["name"]] = arr.reshape(t["shape"]).copy()
    return header["kind"], header["descriptor"], tensors, header["metadata"]
