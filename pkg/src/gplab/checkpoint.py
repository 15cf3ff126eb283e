"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"GPLB" | u32 version | 32-byte config digest | u64 payload length
    | 32-byte SHA-256 of payload | payload

    payload = u32 meta length | meta JSON (UTF-8, sorted keys)
              | u32 tensor count
              | per tensor: u32 name length | name | u32 ndim | ndim x u32 extents
                            | row-major float32 data
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .model import Network, build, get_spec

MAGIC = b"GPLB"
VERSION = 1
_HEADER = struct.Struct("<4sI32sQ32s")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_name: str
    epoch: int
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    config_digest: bytes = bytes(32)

    @property
    def model_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(("param/", "buffer/"))}

    @property
    def class_weights(self) -> Optional[np.ndarray]:
        return self.tensors.get("class_weights")

    def network(self, dtype=np.float32) -> Network:
        net = build(get_spec(self.model_name), seed=0, dtype=dtype)
        net.load_state(self.model_state)
        return net

    def load_into(self, net: Network) -> None:
        if net.spec.name != self.model_name:
            raise CheckpointError(f"checkpoint holds {self.model_name}, network is {net.spec.name}")
        net.load_state(self.model_state)


def _encode(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta, model_name=ckpt.model_name, epoch=ckpt.epoch)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = Path(path)
    payload = _encode(ckpt)
    if len(ckpt.config_digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    header = _HEADER.pack(MAGIC, VERSION, ckpt.config_digest, len(payload), hashlib.sha256(payload).digest())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError("checkpoint payload ends early")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: Union[str, Path], expected_digest: Optional[bytes] = None) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) >= 4 and raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < _HEADER.size:
        raise TruncatedCheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
    _, version, cfg_digest, length, sha = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads version {VERSION}")
    payload = raw[_HEADER.size:]
    if len(payload) < length:
        raise TruncatedCheckpointError(f"{path}: truncated payload ({len(payload)} of {length} bytes)")
    payload = payload[:length]
    if hashlib.sha256(payload).digest() != sha:
        raise DigestMismatchError(f"{path}: payload digest mismatch (file corrupted)")
    if expected_digest is not None and cfg_digest != expected_digest:
        raise ConfigMismatchError(f"{path}: written under a different configuration "
                                  f"({cfg_digest.hex()[:12]} != {expected_digest.hex()[:12]})")

    r = _Reader(payload)
    meta = json.loads(r.take(r.u32()).decode())
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    model_name = meta.pop("model_name")
    epoch = meta.pop("epoch")
    return Checkpoint(model_name, epoch, tensors, meta, cfg_digest)
