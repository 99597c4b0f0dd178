"""Single-file checkpoints.

Layout: ``b"OTNK"`` | format_version (u32 LE) | header length (u64 LE) |
JSON header | raw array bytes | SHA-256 of everything before the digest.
The header is serialized with sorted keys so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, VersionMismatch

MAGIC = b"OTNK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DIGEST = 32


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _pack_arrays(groups: dict[str, dict[str, np.ndarray]]):
    entries, chunks, offset = [], [], 0
    for group, arrays in groups.items():
        for name, arr in arrays.items():
            arr = np.asarray(arr, order="C")
            raw = arr.tobytes()
            entries.append({"group": group, "name": name, "dtype": arr.dtype.str,
                            "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    return entries, b"".join(chunks)


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, blob = _pack_arrays({"params": ckpt.params, "optimizer": ckpt.optimizer_state})
    header = json.dumps({
        "config": ckpt.config, "epoch": ckpt.epoch, "seed": ckpt.seed,
        "extra": ckpt.extra, "arrays": entries,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, ckpt.format_version, len(header)) + header + blob
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size + _DIGEST:
        raise CorruptCheckpoint("checkpoint truncated")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("content hash mismatch (truncated or modified file)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    blob = body[start + header_len:]
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "optimizer": {}}
    for e in header["arrays"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CorruptCheckpoint(f"array {e['name']} truncated")
        groups[e["group"]][e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(tuple(e["shape"])).copy()
    return Checkpoint(config=header["config"], params=groups["params"], optimizer_state=groups["optimizer"],
                      epoch=header["epoch"], seed=header["seed"], extra=header["extra"], format_version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read {path}: {exc}") from None
    return from_bytes(data)
