"""Self-describing checkpoint files.

Layout::

    b"LAMRCKPT"  | u32 format version | u64 header length | JSON header
    | raw tensor bytes (little-endian, C order) | SHA-256 of everything before

The header records the network config, every tensor's name, kind (param or
buffer), dtype, shape and byte offset, the iteration counter, and free-form
``extra`` metadata. The trailing digest catches truncated or partial writes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .network import NetConfig, ParamSet

MAGIC = b"LAMRCKPT"
FORMAT_VERSION = 1
_DIGEST = 32


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamSet, iteration: int = 0, extra=None) -> Path:
    path = Path(path)
    tensors, blobs, offset = [], [], 0
    for kind, store in (("param", params.params), ("buffer", params.buffers)):
        for name, arr in store.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            tensors.append({"name": name, "kind": kind, "dtype": le.dtype.str, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps({"config": params.config.to_dict(), "iteration": int(iteration),
                         "tensors": tensors, "extra": extra or {}}, sort_keys=True).encode()
    body = b"".join([MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(header)), header] + blobs)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Returns ``(params, iteration, extra)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 12 + _DIGEST or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or too short)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is truncated or corrupt")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hlen])
    blob = memoryview(body)[start + hlen:]
    params, buffers = {}, {}
    for t in header["tensors"]:
        raw = blob[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        (params if t["kind"] == "param" else buffers)[t["name"]] = arr
    pset = ParamSet(NetConfig.from_dict(header["config"]), params, buffers)
    return pset, header["iteration"], header["extra"]
