"""Volumes with physical spacing, and their on-disk format.

A volume file is a 32-byte little-endian header (magic ``FNV1``, u32 rank,
three u32 extents, zero padding) followed by float32 samples with x varying
fastest. Spacing and kind live in a JSON sidecar next to it (``<path>.json``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, BufferMismatchError, ContractViolation, SidecarError, VolumeIOError

MAGIC = b"FNV1"
HEADER = struct.Struct("<4sIIII12x")
DEFAULT_SPACING = (0.38, 0.38, 0.38)
KINDS = ("image", "mask", "heatmap", "prob")


@dataclass
class Volume:
    """Dense 3D scalar grid indexed ``data[x, y, z]``; spacing in mm per axis."""

    data: np.ndarray
    spacing: tuple = DEFAULT_SPACING
    kind: str = "image"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ContractViolation(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ContractViolation(f"spacing must be three positive values, got {self.spacing}")
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown volume kind {self.kind!r}")

    @property
    def extents(self) -> tuple:
        return self.data.shape

    def voxel_to_mm(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) * np.asarray(self.spacing)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_volume(volume: Volume, path) -> None:
    path = Path(path)
    buf = np.asarray(volume.data, dtype="<f4").ravel(order="F")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, 3, *volume.extents))
        fh.write(buf.tobytes())
    meta = {"spacing_mm": list(volume.spacing), "kind": volume.kind}
    sidecar_path(path).write_text(json.dumps(meta))


def read_volume(path) -> Volume:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read volume {path}: {exc}") from exc
    if len(raw) < HEADER.size:
        raise BufferMismatchError(f"{path}: buffer mismatch, file shorter than header")
    magic, rank, nx, ny, nz = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if rank != 3:
        raise BufferMismatchError(f"{path}: buffer mismatch, unsupported rank {rank}")
    payload = raw[HEADER.size:]
    expected = nx * ny * nz * 4
    if len(payload) != expected:
        raise BufferMismatchError(
            f"{path}: buffer mismatch, expected {expected} bytes for {(nx, ny, nz)}, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F").astype(np.float32)
    try:
        meta = json.loads(sidecar_path(path).read_text())
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        kind = meta["kind"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise SidecarError(f"{path}: unreadable sidecar: {exc}") from exc
    try:
        return Volume(data, spacing, kind)
    except ContractViolation as exc:
        raise SidecarError(f"{path}: invalid sidecar: {exc}") from exc
