"""Single-file checkpoint container and the append-only metrics log.

Layout: 8-byte magic, little-endian uint16 format version, uint32 header
length, UTF-8 JSON header (metadata, tensor index, payload sha256), then
the raw tensor bytes back to back.
"""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ValidationError

MAGIC = b"MIXSEGCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelCheckpoint:
    metadata: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        index, chunks, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name])
            raw = arr.tobytes()
            index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        payload = b"".join(chunks)
        header = json.dumps({
            "metadata": {**self.metadata, "format_version": FORMAT_VERSION},
            "tensors": index,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }, sort_keys=True).encode()
        return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelCheckpoint":
        if len(blob) < _PREFIX.size:
            raise ValidationError("checkpoint truncated")
        magic, version, hlen = _PREFIX.unpack_from(blob)
        if magic != MAGIC:
            raise ValidationError("not a checkpoint file (bad magic)")
        if version != FORMAT_VERSION:
            raise ValidationError(f"unsupported checkpoint format version {version}")
        try:
            header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ValidationError("corrupted checkpoint header") from None
        payload = blob[_PREFIX.size + hlen:]
        if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
            raise ValidationError("checkpoint payload checksum mismatch")
        tensors = {}
        for t in header["tensors"]:
            raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
            tensors[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        return cls(header["metadata"], tensors)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"checkpoint {path} does not exist")
        return cls.from_bytes(path.read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    def module(self):
        """Rebuild the torch module in eval mode."""
        from .nets import build_model

        return build_model(self.metadata, self.tensors)

    @property
    def taxonomy(self):
        from .core import ClassTaxonomy

        return ClassTaxonomy(tuple(self.metadata["taxonomy"]))


def as_checkpoint(obj) -> ModelCheckpoint:
    if isinstance(obj, ModelCheckpoint):
        return obj
    return ModelCheckpoint.load(obj)


class MetricsLog:
    """Append-only newline-delimited JSON records. ``path=None`` keeps records in memory only."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, **record):
        record.setdefault("wall_clock", time.time())
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def column(self, key):
        return [r[key] for r in self.records if key in r]
