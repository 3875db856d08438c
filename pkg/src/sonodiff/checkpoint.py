"""Checkpoint container: magic "ILDC", a version byte, a JSON header listing
every tensor (name, dtype, shape, offset, checksum, frozen flag) plus run
metadata, then the raw little-endian tensor payloads.

Serialization is canonical (sorted names, sorted JSON keys), so saving a
loaded checkpoint reproduces the original file byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .exceptions import CheckpointError

MAGIC = b"ILDC"
VERSION = 1

_DTYPE_TAGS = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}
_NP_TO_TAG = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8", np.dtype(np.int64): "<i8"}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    frozen: set[str]
    step: int
    validation_metric: float | None
    fingerprint: str | None
    config: dict | None = None
    extra: dict = field(default_factory=dict)

    def tensor(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise CheckpointError(f"checkpoint has no tensor {name!r}")
        return self.tensors[name]


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    if arr.dtype == np.int32:
        arr = arr.astype(np.int64)
    if arr.dtype not in _NP_TO_TAG:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return arr


def save_checkpoint(
    path,
    tensors: dict,
    *,
    config: RunConfig | None = None,
    step: int = 0,
    validation_metric: float | None = None,
    frozen: set[str] | None = None,
    extra: dict | None = None,
) -> None:
    frozen = frozen or set()
    arrays = {name: _to_numpy(t) for name, t in tensors.items()}

    entries = []
    offset = 0
    payload_parts = []
    for name in sorted(arrays):
        arr = arrays[name]
        tag = _NP_TO_TAG[arr.dtype]
        blob = arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": tag,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
                "crc32": zlib.crc32(blob),
                "frozen": name in frozen,
            }
        )
        payload_parts.append(blob)
        offset += len(blob)

    header = {
        "fingerprint": config.fingerprint() if config is not None else None,
        "config": config.to_dict() if config is not None else None,
        "step": step,
        "validation_metric": validation_metric,
        "extra": extra or {},
        "tensors": entries,
    }
    header_blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(header_blob)))
        fh.write(header_blob)
        for part in payload_parts:
            fh.write(part)


def load_checkpoint(path, *, config: RunConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint. When a config is supplied, its
    fingerprint must match the one stored at save time."""
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    blob = p.read_bytes()
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise CheckpointError(f"{p}: missing {MAGIC!r} magic")
    version = blob[4]
    if version != VERSION:
        raise CheckpointError(f"{p}: unsupported version {version}")
    (header_len,) = struct.unpack("<I", blob[5:9])
    try:
        header = json.loads(blob[9 : 9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{p}: corrupt header") from exc
    payload = blob[9 + header_len :]

    tensors: dict[str, np.ndarray] = {}
    frozen: set[str] = set()
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{p}: truncated payload for {entry['name']!r}")
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"{p}: checksum mismatch for {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPE_TAGS[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
        if entry["frozen"]:
            frozen.add(entry["name"])

    if config is not None:
        want = config.fingerprint()
        if header.get("fingerprint") != want:
            raise CheckpointError(
                f"{p}: config fingerprint mismatch "
                f"(checkpoint {header.get('fingerprint')!r}, active {want!r})"
            )

    return Checkpoint(
        tensors=tensors,
        frozen=frozen,
        step=header.get("step", 0),
        validation_metric=header.get("validation_metric"),
        fingerprint=header.get("fingerprint"),
        config=header.get("config"),
        extra=header.get("extra", {}),
    )
