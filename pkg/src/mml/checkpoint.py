"""Bit-exact persistence of model parameters.

Binary layout, all little-endian:

    magic "MMLC" | u32 version=1 | u32 entry count |
    per entry: u32 key length | UTF-8 key | u8 rank | rank x u32 dims |
               prod(dims) x f32 payload

Entries are written sorted by key. A JSON sidecar ``<file>.meta.json``
carries the assembly id, merge provenance, and the validation mAP so
merge strategies never have to re-evaluate. Writes go to a temp file that
is fsynced and renamed under an advisory lock; reads validate the magic,
version, key grammar, and payload lengths.
"""

from __future__ import annotations

import fcntl
import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MMLC"
FORMAT_VERSION = 1
MAX_PAYLOAD_BYTES = 1 << 30  # refuse absurd files; toy models are ~200 KB

KEY_PATTERN = re.compile(
    r"^(FeatureExtractor|PV2BEV|TemporalFusion|Head)/[a-z0-9-]+/block-\d+/[A-Za-z0-9_]+$"
)


class CheckpointError(Exception):
    pass


class StorageError(CheckpointError):
    pass


class FormatError(CheckpointError):
    pass


class CorruptionError(CheckpointError):
    pass


@dataclass(frozen=True)
class MergeEvent:
    round_index: int
    strategy: str
    contributors: tuple[str, ...]

    def as_dict(self) -> dict:
        return {
            "round": self.round_index,
            "strategy": self.strategy,
            "contributors": list(self.contributors),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MergeEvent":
        return cls(int(d["round"]), str(d["strategy"]), tuple(d["contributors"]))


@dataclass
class Checkpoint:
    assembly_id: str
    params: dict[str, np.ndarray]
    provenance: list[MergeEvent] = field(default_factory=list)
    val_map: float | None = None
    format_version: int = FORMAT_VERSION

    def validate(self) -> None:
        for key, arr in self.params.items():
            if not KEY_PATTERN.match(key):
                raise FormatError(f"parameter key {key!r} violates the namespace grammar")
            if arr.dtype != np.float32:
                raise FormatError(f"parameter {key!r} is {arr.dtype}, expected float32")

    def module_prefixes(self) -> set[str]:
        return {"/".join(k.split("/")[:2]) for k in self.params}

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.assembly_id,
            {k: v.copy() for k, v in self.params.items()},
            list(self.provenance),
            self.val_map,
            self.format_version,
        )


def extract_module_weights(ckpt: Checkpoint, family, variant_id: str) -> dict[str, np.ndarray]:
    """Parameters under one ``family/variant/`` prefix; empty when absent."""
    family_value = getattr(family, "value", family)
    prefix = f"{family_value}/{variant_id}/"
    return {k: v for k, v in ckpt.params.items() if k.startswith(prefix)}


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    ckpt.validate()
    payload_bytes = sum(a.nbytes for a in ckpt.params.values())
    if payload_bytes > MAX_PAYLOAD_BYTES:
        raise StorageError(f"refusing to write {payload_bytes} bytes to {path}")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", ckpt.format_version, len(ckpt.params))
    for key in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[key], dtype="<f4")
        kb = key.encode("utf-8")
        blob += struct.pack("<I", len(kb)) + kb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    meta = {
        "format_version": ckpt.format_version,
        "assembly_id": ckpt.assembly_id,
        "provenance": [e.as_dict() for e in ckpt.provenance],
        "val_map": ckpt.val_map,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    lock_path = path.with_name(path.name + ".lock")
    with open(lock_path, "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        try:
            _write_atomic(path, bytes(blob))
            _write_atomic(_sidecar(path), json.dumps(meta, indent=2).encode("utf-8"))
        except OSError as exc:
            raise StorageError(f"failed writing checkpoint {path}: {exc}") from exc
        finally:
            fcntl.flock(lock, fcntl.LOCK_UN)


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"{self.path}: truncated at byte {self.pos} (+{n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{path}: format version {version}, this reader handles {FORMAT_VERSION}"
        )
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = r.unpack("<I")
        if klen > 4096:
            raise CorruptionError(f"{path}: implausible key length {klen}")
        key = r.take(klen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        if any(d == 0 for d in dims):
            raise CorruptionError(f"{path}: zero dim in {key!r}")
        n = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * n)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if key in params:
            raise CorruptionError(f"{path}: duplicate key {key!r}")
        params[key] = arr
    if r.pos != len(raw):
        raise CorruptionError(f"{path}: {len(raw) - r.pos} trailing bytes")
    side = _sidecar(path)
    if not side.exists():
        raise FormatError(f"{path}: missing sidecar {side.name}")
    meta = json.loads(side.read_text())
    ckpt = Checkpoint(
        assembly_id=str(meta["assembly_id"]),
        params=params,
        provenance=[MergeEvent.from_dict(e) for e in meta.get("provenance", [])],
        val_map=meta.get("val_map"),
        format_version=version,
    )
    ckpt.validate()
    return ckpt


def checkpoint_from_params(
    assembly_id: str, params: Mapping[str, "object"], val_map: float | None = None
) -> Checkpoint:
    """Snapshot live Parameter objects (or arrays) into a checkpoint."""
    snap: dict[str, np.ndarray] = {}
    for key, p in params.items():
        arr = p.tensor.data if hasattr(p, "tensor") else np.asarray(p)
        snap[key] = np.array(arr, dtype=np.float32, copy=True)
    return Checkpoint(assembly_id, snap, val_map=val_map)
