"""Binary file formats: ``.rvox`` voxel volumes and ``RGPT`` checkpoints.

``.rvox`` layout (little-endian)::

    b"RVOX0001"            8 bytes
    d, h, w                3 x uint32
    voxel edge length      float64, micrometres
    voxels                 d*h*w bytes, 1 = pore, 0 = solid, w fastest

Checkpoint layout (little-endian)::

    b"RGPT0001"            8 bytes
    version                uint32
    metadata length        uint64
    metadata               UTF-8 JSON: {"meta": {...}, "tensors": [{name, shape, offset}]}
    payload                float32 tensors back to back, offsets relative to payload start
    checksum               uint64, first 8 bytes of BLAKE2b over every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ChecksumError, ConfigurationError, DefinitionError, FormatError

RVOX_MAGIC = b"RVOX0001"
CKPT_MAGIC = b"RGPT0001"
CKPT_VERSION = 1


@dataclass
class VoxelVolume:
    """Binary pore (1) / solid (0) field with a physical voxel edge length in micrometres."""

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DefinitionError(f"volume must be 3-d, got shape {data.shape}")
        if data.size and not np.isin(data, (0, 1)).all():
            raise DefinitionError("volume values must be strictly binary")
        if not self.voxel_size > 0:
            raise ConfigurationError("voxel_size must be > 0")
        self.data = data.astype(np.uint8, copy=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def _atomic_write(path: Path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def encode_rvox(vol: VoxelVolume) -> bytes:
    d, h, w = vol.shape
    head = RVOX_MAGIC + struct.pack("<3Id", d, h, w, float(vol.voxel_size))
    return head + np.ascontiguousarray(vol.data, dtype=np.uint8).tobytes()


def decode_rvox(blob: bytes) -> VoxelVolume:
    if len(blob) < 28 or blob[:8] != RVOX_MAGIC:
        raise FormatError("not an RVOX0001 file")
    d, h, w, a = struct.unpack_from("<3Id", blob, 8)
    body = blob[28:]
    if len(body) != d * h * w:
        raise FormatError(f"payload has {len(body)} bytes, expected {d * h * w}")
    data = np.frombuffer(body, dtype=np.uint8).reshape(d, h, w).copy()
    if not np.isin(data, (0, 1)).all():
        raise FormatError("voxel bytes must be 0 or 1")
    return VoxelVolume(data, a)


def write_rvox(path, vol: VoxelVolume) -> None:
    _atomic_write(Path(path), encode_rvox(vol))


def read_rvox(path) -> VoxelVolume:
    return decode_rvox(Path(path).read_bytes())


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def checksum64(blob: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def encode_checkpoint(meta: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    table, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header + b"".join(chunks)
    return body + struct.pack("<Q", checksum64(body))


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    """Parse and verify a checkpoint; nothing is returned unless every check passes."""
    if len(blob) < 28 or blob[:8] != CKPT_MAGIC:
        raise FormatError("not an RGPT0001 checkpoint")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (stored,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if checksum64(blob[:-8]) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    start = 20
    if start + hlen > len(blob) - 8:
        raise FormatError("truncated checkpoint metadata")
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    payload = memoryview(blob)[start + hlen:len(blob) - 8]
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        if lo + 4 * n > len(payload):
            raise FormatError(f"tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[lo:lo + 4 * n], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header["meta"], tensors


def write_checkpoint(path, meta: dict, tensors: dict[str, torch.Tensor]) -> str:
    """Write atomically; returns the SHA-256 hex digest of the file."""
    blob = encode_checkpoint(meta, tensors)
    _atomic_write(Path(path), blob)
    return hashlib.sha256(blob).hexdigest()


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor], str]:
    blob = Path(path).read_bytes()
    meta, tensors = decode_checkpoint(blob)
    return meta, tensors, hashlib.sha256(blob).hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
