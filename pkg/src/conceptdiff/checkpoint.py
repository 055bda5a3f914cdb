"""Binary checkpoint container shared by all trained models.

Layout: magic, version u32, length-prefixed JSON header (architecture
descriptor, metadata, tensor names/shapes), raw little-endian float32
tensor data in header order, CRC-32 trailer over everything before it.
"""

import json
import struct
import zlib

import numpy as np

from .errors import CorruptionError

MAGIC = b"CDIFCKPT"
VERSION = 1


def save_checkpoint(path, arch: str, meta: dict, tensors: dict):
    header = {
        "arch": arch,
        "meta": meta,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(hbytes))
    body += hbytes
    for arr in tensors.values():
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path):
    """Returns (arch, meta, {name: float32 array}). Raises CorruptionError."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptionError(f"not a checkpoint file: {path}")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CorruptionError(f"checkpoint CRC mismatch: {path}")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise CorruptionError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)
        off += 4 * n
    if off != len(blob) - 4:
        raise CorruptionError(f"checkpoint payload length mismatch: {path}")
    return header["arch"], header["meta"], tensors
