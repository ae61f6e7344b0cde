"""Volume container: a JSON sidecar plus an adjacent raw payload.

Layout is X fastest, then Y, Z and V slowest. Signal and parameter volumes
are little-endian float32; masks are uint8 holding 0 or 1. The sidecar
fields are ``shape`` (X, Y, Z, V), ``voxel_size_mm``, ``kind``, ``scheme``
(a path or null), ``dtype`` and ``byte_order``.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .acquisition import VoxelTable, normalize_and_average, normalize_directions

log = logging.getLogger(__name__)

KIND_DTYPES = {"signal": "float32", "parameter": "float32", "mask": "uint8"}
_NUMPY = {"float32": "<f4", "uint8": "u1"}
FILL_VALUE = np.nan


class VolumeError(ValueError):
    pass


@dataclass
class VolumeContainer:
    """A 4-D volume (X, Y, Z, V) with its descriptor fields."""

    data: np.ndarray
    kind: str = "signal"
    voxel_size_mm: tuple = (1.0, 1.0, 1.0)
    scheme: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KIND_DTYPES:
            raise VolumeError(f"unknown kind {self.kind!r}; expected one of {sorted(KIND_DTYPES)}")
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise VolumeError(f"volume must be 4-D with positive extents, got shape {data.shape}")
        if self.kind == "mask":
            if not np.isin(data, (0, 1)).all():
                raise VolumeError("mask volume holds values other than 0 and 1")
        self.data = data.astype(_NUMPY[self.dtype])
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        if len(self.voxel_size_mm) != 3 or min(self.voxel_size_mm) <= 0:
            raise VolumeError("voxel_size_mm must be three positive numbers")

    @property
    def dtype(self) -> str:
        return KIND_DTYPES[self.kind]

    @property
    def shape(self) -> tuple:
        return tuple(int(s) for s in self.data.shape)

    def descriptor(self) -> dict:
        return {"shape": list(self.shape), "voxel_size_mm": list(self.voxel_size_mm), "kind": self.kind,
                "scheme": self.scheme, "dtype": self.dtype, "byte_order": "little"}

    def payload(self) -> bytes:
        return self.data.tobytes(order="F")


def _paths(path):
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".raw") else p
    return stem.with_suffix(".json"), stem.with_suffix(".raw")


def _atomic_write(path: Path, blob: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(vol: VolumeContainer, path) -> Path:
    """Write ``<stem>.json`` and ``<stem>.raw``; returns the sidecar path."""
    side, raw = _paths(path)
    side.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(raw, vol.payload())
    _atomic_write(side, (json.dumps(vol.descriptor(), indent=2, sort_keys=True) + "\n").encode())
    return side


def read_volume(path) -> VolumeContainer:
    side, raw = _paths(path)
    if not side.exists():
        raise FileNotFoundError(f"volume sidecar not found: {side}")
    if not raw.exists():
        raise FileNotFoundError(f"volume payload not found: {raw}")
    try:
        desc = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise VolumeError(f"{side}: invalid JSON ({e})") from None
    missing = {"shape", "voxel_size_mm", "kind", "scheme", "dtype", "byte_order"} - set(desc)
    if missing:
        raise VolumeError(f"{side}: missing fields {sorted(missing)}")
    kind = desc["kind"]
    if kind not in KIND_DTYPES:
        raise VolumeError(f"{side}: unknown kind {kind!r}")
    if desc["dtype"] != KIND_DTYPES[kind]:
        raise VolumeError(f"{side}: kind {kind} requires dtype {KIND_DTYPES[kind]}, got {desc['dtype']}")
    if desc["byte_order"] != "little":
        raise VolumeError(f"{side}: unsupported byte_order {desc['byte_order']!r}")
    shape = desc["shape"]
    if (not isinstance(shape, list) or len(shape) != 4
            or not all(isinstance(s, int) and s > 0 for s in shape)):
        raise VolumeError(f"{side}: shape must be four positive integers, got {shape}")
    blob = raw.read_bytes()
    dt = np.dtype(_NUMPY[desc["dtype"]])
    expected = int(np.prod(shape)) * dt.itemsize
    if len(blob) != expected:
        raise VolumeError(f"{raw}: payload length mismatch, expected {expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype=dt).reshape(shape, order="F")
    return VolumeContainer(data, kind, tuple(desc["voxel_size_mm"]), desc["scheme"])


def mask_indices(mask) -> np.ndarray:
    """Flat (X-fastest) indices of the non-zero voxels of a mask."""
    m = mask.data[..., 0] if isinstance(mask, VolumeContainer) else np.asarray(mask)
    return np.flatnonzero(m.ravel(order="F"))


def volume_to_table(volume: VolumeContainer, mask, scheme, average=True) -> VoxelTable:
    """Normalised signal vectors of the masked voxels, in ascending flat order.

    ``average=False`` keeps direction-level ratios (one column per DW entry).
    Voxels whose b0 is not positive cannot be normalised; they are dropped
    with a warning.
    """
    X, Y, Z, V = volume.shape
    m = mask.data[..., 0] if isinstance(mask, VolumeContainer) else np.asarray(mask)
    if m.shape != (X, Y, Z):
        raise VolumeError(f"mask shape {m.shape} does not match volume {(X, Y, Z)}")
    if V != len(scheme.points):
        raise VolumeError(f"volume has {V} entries but the scheme has {len(scheme.points)}")
    idx = mask_indices(m)
    if idx.size == 0:
        raise VolumeError("no voxels selected")
    raw = volume.data.reshape(-1, V, order="F")[idx].astype(float)
    signals, valid = (normalize_and_average if average else normalize_directions)(raw, scheme)
    if not valid.all():
        log.warning("dropping %d voxels with non-positive b0", int((~valid).sum()))
        signals, idx = signals[valid], idx[valid]
        if idx.size == 0:
            raise VolumeError("no voxels selected")
    return VoxelTable(signals, idx, (X, Y, Z))


def table_to_maps(fit, dims, voxel_size_mm=(1.0, 1.0, 1.0), fill=FILL_VALUE) -> dict:
    """One parameter volume per fitted parameter; unfitted voxels get ``fill``."""
    dims = tuple(int(d) for d in dims)
    n = int(np.prod(dims))
    idx = np.asarray(fit.voxel_indices)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise VolumeError(f"voxel indices exceed volume of {n} voxels")
    maps = {}
    for name, values in fit.params.items():
        flat = np.full(n, fill, dtype=np.float64)
        flat[idx] = values
        maps[name] = VolumeContainer(flat.reshape(dims, order="F"), "parameter", voxel_size_mm)
    return maps


def table_to_volume(signals, dims, voxel_indices, voxel_size_mm=(1.0, 1.0, 1.0), scheme=None,
                    kind="signal") -> VolumeContainer:
    """Scatter per-voxel rows into an (X, Y, Z, V) volume (zeros elsewhere)."""
    signals = np.atleast_2d(signals)
    n = int(np.prod(dims))
    flat = np.zeros((n, signals.shape[1]))
    flat[np.asarray(voxel_indices)] = signals
    return VolumeContainer(flat.reshape((*dims, signals.shape[1]), order="F"), kind, voxel_size_mm,
                           scheme)
