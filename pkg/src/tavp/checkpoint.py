"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TAVP"                      4 bytes  magic
    version                      u32
    header_length                u32
    header                       UTF-8 JSON, header_length bytes
    tensor data                  little-endian float64, concatenated

The JSON header holds ``stage``, ``config`` (the serialized run config),
``config_hash`` (SHA-256 of that text), ``chain`` (parameter hashes of every
stage so far) and ``manifest``: a list of ``{name, shape, offset, nbytes}``
entries whose offsets are relative to the start of the tensor data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .netcore.params import ParamStore

MAGIC = b"TAVP"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class CheckpointHeader:
    stage: str
    config: str
    config_hash: str
    chain: list = field(default_factory=list)
    manifest: list = field(default_factory=list)
    version: int = VERSION

    def to_json(self) -> bytes:
        body = {
            "stage": self.stage,
            "config": self.config,
            "config_hash": self.config_hash,
            "chain": self.chain,
            "manifest": self.manifest,
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path, store: ParamStore, stage: str, config_text: str, chain=()) -> CheckpointHeader:
    manifest = []
    blobs = []
    offset = 0
    for name, p in store.items():
        data = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = CheckpointHeader(
        stage=stage,
        config=config_text,
        config_hash=hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        chain=list(chain),
        manifest=manifest,
    )
    head = header.to_json()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return header


def read_header(path) -> tuple[CheckpointHeader, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    end = _PREFIX.size + hlen
    if len(raw) < end:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        body = json.loads(raw[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    header = CheckpointHeader(
        stage=body["stage"],
        config=body["config"],
        config_hash=body["config_hash"],
        chain=body.get("chain", []),
        manifest=body["manifest"],
        version=version,
    )
    if hashlib.sha256(header.config.encode("utf-8")).hexdigest() != header.config_hash:
        raise CheckpointError(f"{path}: config hash does not match embedded config")
    return header, raw[end:]


def read_checkpoint(path, store: ParamStore) -> CheckpointHeader:
    """Load every tensor of ``path`` into ``store``; shapes must match exactly."""
    header, data = read_header(path)
    seen = set()
    for entry in header.manifest:
        name = entry["name"]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["nbytes"] != 8 * count:
            raise CheckpointShapeError(f"{name}: manifest shape {shape} disagrees with nbytes {entry['nbytes']}", name)
        if name not in store:
            raise CheckpointShapeError(f"{name}: not a parameter of this model", name)
        if store[name].shape != shape:
            raise CheckpointShapeError(f"{name}: checkpoint shape {shape} vs model shape {store[name].shape}", name)
        lo = entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointTruncatedError(f"{path}: tensor {name} extends past end of file")
        store[name].data[...] = np.frombuffer(data[lo:hi], dtype="<f8").reshape(shape)
        seen.add(name)
    missing = [n for n, _ in store.items() if n not in seen]
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks {len(missing)} parameters, e.g. {missing[0]}", missing[0])
    return header
