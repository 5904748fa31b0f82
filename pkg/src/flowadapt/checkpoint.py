"""Single-file checkpoints.

Layout (all little-endian)::

    magic  b"FACK"           4 bytes
    version                  uint32
    metadata length N        uint64
    metadata                 N bytes of UTF-8 JSON (sorted keys)
    tensor data              float64 arrays, row-major, in metadata order

Tensor names are ``<model>/<parameter path>`` and are stored sorted, so
equal models produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import ParameterPartition
from .layers import Module

MAGIC = b"FACK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class FingerprintMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def model_state(self, model_name: str) -> dict[str, np.ndarray]:
        prefix = model_name + "/"
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def partition(self, model_name: str) -> ParameterPartition | None:
        part = self.meta.get("partitions", {}).get(model_name)
        return None if part is None else ParameterPartition.from_dict(part)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def save_checkpoint(path, models: dict[str, Module], meta: dict | None = None,
                    partitions: dict[str, ParameterPartition] | None = None, step: int = 0) -> Path:
    """Write every parameter of ``models`` plus ``meta`` (must be JSON-serialisable)."""
    tensors: dict[str, np.ndarray] = {}
    for model_name, model in models.items():
        if "/" in model_name:
            raise ValueError(f"model name {model_name!r} may not contain '/'")
        for name, p in model.named_parameters():
            tensors[f"{model_name}/{name}"] = p.data
    names = sorted(tensors)
    meta = dict(meta or {})
    meta["format_version"] = FORMAT_VERSION
    meta["step"] = int(step)
    meta["partitions"] = {k: v.to_dict() for k, v in (partitions or {}).items()}
    meta["tensors"] = [{"name": n, "shape": list(tensors[n].shape)} for n in names]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_fingerprint: str | None = None,
                    fingerprint_key: str = "backbone_fingerprint", override: bool = False) -> Checkpoint:
    """Read a checkpoint; a fingerprint mismatch raises unless ``override`` is set."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, n_meta = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = _HEADER.size
    meta = json.loads(raw[offset:offset + n_meta].decode())
    offset += n_meta
    if expected_fingerprint is not None and meta.get(fingerprint_key) != expected_fingerprint and not override:
        raise FingerprintMismatch(
            f"{path}: {fingerprint_key} {meta.get(fingerprint_key)} != expected {expected_fingerprint}; "
            "pass the override flag to load anyway")
    tensors = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated tensor data at {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(meta, tensors)


def apply_partition(model: Module, partition: ParameterPartition | None) -> None:
    """Set ``requires_grad`` from a stored partition (everything trainable if None)."""
    named = dict(model.named_parameters())
    if partition is None:
        for p in named.values():
            p.requires_grad = True
        return
    listed = set(partition.trainable) | set(partition.frozen)
    if listed != set(named):
        raise ValueError("stored partition does not cover exactly the model's parameters")
    for name in partition.frozen:
        named[name].requires_grad = False
    for name in partition.trainable:
        named[name].requires_grad = True


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
