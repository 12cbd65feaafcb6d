"""Single-file checkpoint archive.

Layout::

    b"LDCKPT01"                  8-byte magic
    uint64 little-endian         length N of the manifest
    N bytes                      UTF-8 JSON manifest
    payload                      concatenated little-endian float32 tensors

The manifest lists every tensor with name, shape, dtype and byte offset into
the payload, plus free-form ``meta`` (config, step counter, seeds, ...).
Keys are written sorted so identical state produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import FormatError, MissingPrerequisite

MAGIC = b"LDCKPT01"
FORMAT_VERSION = 1


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype != np.float32:
        raise TypeError(f"checkpoint tensors must be float32, got {arr.dtype}")
    return np.ascontiguousarray(arr, dtype="<f4")


def save_checkpoint(path, tensors: Mapping[str, Any], meta: Mapping[str, Any]) -> str:
    """Write tensors + meta to ``path``; returns the git-style content hash."""
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32-le",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"version": FORMAT_VERSION, "tensors": entries, "meta": dict(meta)}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return content_hash(blob)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisite(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint archive")
    (n,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16:16 + n].decode("utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {manifest.get('version')}")
    payload = memoryview(blob)[16 + n:]
    tensors = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise FormatError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, manifest["meta"]


def content_hash(data: bytes) -> str:
    """SHA-1 over ``b"blob <len>\\0" + data``, as git hashes file contents."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def file_hash(path) -> str:
    return content_hash(Path(path).read_bytes())
