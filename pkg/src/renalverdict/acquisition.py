"""Acquisition schemes, b0 normalisation and direction averaging.

External b-values are in s/mm^2. Everything inside the package works in
ms/um^2 (``b_internal = b * 1e-3``), so that ``b * d`` is dimensionless for
diffusivities in um^2/ms.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

KIDNEY_B = (70.0, 90.0, 150.0, 500.0, 1000.0, 1500.0, 2000.0, 2200.0, 2500.0)
KIDNEY_SMALL_DELTA = (4.8, 4.8, 4.8, 12.0, 12.0, 26.3, 16.8, 16.8, 21.4)
KIDNEY_BIG_DELTA = (27.0, 27.0, 27.0, 34.0, 34.0, 47.0, 37.5, 37.5, 43.5)
# Minimum TE per shell is not tabulated; only the 54-87 ms span is known.
# These interpolate that span by gradient duty (delta + Delta) and only
# matter for b0 pairing, never for the signal model.
KIDNEY_TE = (54.0, 55.0, 56.0, 65.0, 66.0, 87.0, 71.0, 72.0, 82.0)

SCHEME_HEADER = ("index", "b_s_mm2", "delta_ms", "Delta_ms", "TE_ms", "dir", "is_b0")


class SchemeError(ValueError):
    """Raised for malformed acquisition schemes or scheme files."""


@dataclass(frozen=True)
class AcquisitionPoint:
    """One measurement of a PGSE acquisition.

    ``b`` is in s/mm^2, times in ms. ``direction_index`` is None for b0 points
    and for direction-averaged DW points.
    """

    b: float
    delta: float
    Delta: float
    te: float
    direction_index: Optional[int] = None
    is_b0: bool = False

    def __post_init__(self):
        if self.b < 0:
            raise SchemeError(f"negative b-value {self.b}")
        if self.is_b0 != (self.b == 0):
            raise SchemeError(f"is_b0={self.is_b0} inconsistent with b={self.b}")
        if not 0 < self.delta < self.Delta:
            raise SchemeError(f"need 0 < delta < Delta, got {self.delta}, {self.Delta}")
        if self.te <= 0:
            raise SchemeError(f"echo time must be positive, got {self.te}")
        if self.direction_index is not None and self.direction_index not in (0, 1, 2):
            raise SchemeError(f"direction index {self.direction_index} not in {{0,1,2}}")

    @property
    def b_internal(self) -> float:
        """b-value in ms/um^2."""
        return self.b * 1e-3


def pulse_strength_factor(p: AcquisitionPoint) -> float:
    """Squared gradient factor gamma^2 G^2 in um^-2 ms^-2.

    Inverts ``b = gamma^2 G^2 delta^2 (Delta - delta/3)`` for rectangular PGSE.
    """
    if p.is_b0 or p.b == 0:
        raise SchemeError("no gradient factor for b=0")
    return p.b_internal / (p.delta ** 2 * (p.Delta - p.delta / 3.0))


@dataclass
class AcquisitionScheme:
    """Ordered list of acquisition points plus their TE-matched b0 pairing."""

    points: list
    b0_pairing: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = list(self.points)
        if not self.b0_pairing:
            self.b0_pairing = _pair_by_te(self.points)
        self._validate()

    def _validate(self):
        for i, p in enumerate(self.points):
            if p.is_b0:
                if i in self.b0_pairing:
                    raise SchemeError(f"b0 point {i} cannot itself be paired")
                continue
            j = self.b0_pairing.get(i)
            if j is None:
                raise SchemeError(f"DW point {i} (b={p.b}, TE={p.te}) has no TE-matched b0")
            if not self.points[j].is_b0 or self.points[j].te != p.te:
                raise SchemeError(f"DW point {i} paired with non-matching entry {j}")

    def __len__(self):
        return len(self.points)

    @property
    def dw_indices(self) -> np.ndarray:
        return np.array([i for i, p in enumerate(self.points) if not p.is_b0], dtype=int)

    @property
    def b0_indices(self) -> np.ndarray:
        return np.array([i for i, p in enumerate(self.points) if p.is_b0], dtype=int)

    @property
    def bvals(self) -> np.ndarray:
        """b-values in s/mm^2."""
        return np.array([p.b for p in self.points], dtype=float)

    def shells(self) -> list:
        """DW shells in order of first appearance.

        Each shell is ``(b, delta, Delta, te, dw_indices, b0_index)``.
        """
        seen = {}
        for i in self.dw_indices:
            p = self.points[i]
            key = (p.b, p.delta, p.Delta, p.te)
            seen.setdefault(key, []).append(int(i))
        out = []
        for (b, delta, Delta, te), idx in seen.items():
            out.append((b, delta, Delta, te, idx, self.b0_pairing[idx[0]]))
        return out

    def averaged(self) -> "AcquisitionScheme":
        """Scheme of the direction-averaged vector: one DW point per shell,
        then one b0 point per shell, in shell order."""
        dw, b0 = [], []
        for b, delta, Delta, te, _, _ in self.shells():
            dw.append(AcquisitionPoint(b, delta, Delta, te))
            b0.append(AcquisitionPoint(0.0, delta, Delta, te, is_b0=True))
        n = len(dw)
        return AcquisitionScheme(dw + b0, {i: n + i for i in range(n)})

    @property
    def n_image_volumes(self) -> int:
        """Volumes after direction averaging: one DW and one b0 per shell."""
        return 2 * len(self.shells())

    def subset_shells(self, bvalues: Sequence[float]) -> "AcquisitionScheme":
        """Keep the shells with the given b-values (all directions and their
        b0s), preserving the original order."""
        wanted = {float(b) for b in bvalues}
        keep_b0 = set()
        keep = []
        for b, _, _, _, idx, j in self.shells():
            if b in wanted:
                keep.extend(idx)
                keep_b0.add(j)
        keep = sorted(set(keep) | keep_b0)
        remap = {old: new for new, old in enumerate(keep)}
        points = [self.points[i] for i in keep]
        pairing = {remap[i]: remap[self.b0_pairing[i]] for i in keep if i in self.b0_pairing}
        return AcquisitionScheme(points, pairing)


def _pair_by_te(points) -> dict:
    b0_by_te = {}
    for i, p in enumerate(points):
        if p.is_b0:
            b0_by_te.setdefault(p.te, i)
    pairing = {}
    for i, p in enumerate(points):
        if not p.is_b0 and p.te in b0_by_te:
            pairing[i] = b0_by_te[p.te]
    return pairing


def kidney_protocol() -> AcquisitionScheme:
    """The nine-shell renal protocol: per shell one b0 then three orthogonal
    directions, 36 entries in total."""
    points = []
    for b, d, D, te in zip(KIDNEY_B, KIDNEY_SMALL_DELTA, KIDNEY_BIG_DELTA, KIDNEY_TE):
        points.append(AcquisitionPoint(0.0, d, D, te, is_b0=True))
        for k in range(3):
            points.append(AcquisitionPoint(b, d, D, te, direction_index=k))
    return AcquisitionScheme(points)


def _ratios(raw, scheme):
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if raw.shape[1] != len(scheme):
        raise SchemeError(f"expected {len(scheme)} values per voxel, got {raw.shape[1]}")
    dw = scheme.dw_indices
    ref = raw[:, [scheme.b0_pairing[i] for i in dw]]
    valid = np.all(ref > 0, axis=1) & np.all(np.isfinite(raw), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = raw[:, dw] / ref
    return ratios, valid


def normalize_directions(raw, scheme: AcquisitionScheme):
    """Direction-level DW ratios to the TE-matched b0.

    Returns ``(ratios, valid)`` with ratios of shape (n_voxels, n_dw).
    """
    return _ratios(raw, scheme)


def normalize_and_average(raw, scheme: AcquisitionScheme):
    """Normalise by TE-matched b0 and average directions within each shell.

    Parameters
    ----------
    raw : array, shape (n_voxels, len(scheme)) or (len(scheme),)
    scheme : AcquisitionScheme

    Returns
    -------
    signals : array, shape (n_voxels, 2 * n_shells)
        Mean DW ratio per shell, followed by each shell's b0 divided by the
        b0 acquired at the shortest TE.
    valid : bool array, shape (n_voxels,)
        False where any b0 used for normalisation is not strictly positive.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    ratios, valid = _ratios(raw, scheme)
    dw = list(scheme.dw_indices)
    shells = scheme.shells()
    b0_cols = [s[5] for s in shells]
    te = np.array([scheme.points[j].te for j in b0_cols])
    ref_col = b0_cols[int(np.argmin(te))]
    out = np.empty((raw.shape[0], 2 * len(shells)))
    for k, (_, _, _, _, idx, _) in enumerate(shells):
        cols = [dw.index(i) for i in idx]
        out[:, k] = ratios[:, cols].mean(axis=1)
    valid &= raw[:, ref_col] > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out[:, len(shells):] = raw[:, b0_cols] / raw[:, [ref_col]]
    valid &= np.all(np.isfinite(out), axis=1)
    return out, valid


def estimate_duration(scheme: AcquisitionScheme, seconds_per_volume: float) -> float:
    """Scan time in minutes, one decimal, from the averaged volume count."""
    if seconds_per_volume <= 0:
        raise ValueError("seconds_per_volume must be positive")
    if len(scheme) == 0:
        return 0.0
    return round(scheme.n_image_volumes * seconds_per_volume / 60.0, 1)


def calibrate_seconds_per_volume(scheme: AcquisitionScheme, minutes: float = 40.0) -> float:
    """Seconds per image volume that makes ``scheme`` last ``minutes``."""
    return minutes * 60.0 / scheme.n_image_volumes


def write_scheme(scheme: AcquisitionScheme, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(scheme_to_csv(scheme))


def scheme_to_csv(scheme: AcquisitionScheme) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCHEME_HEADER)
    for i, p in enumerate(scheme.points):
        w.writerow([i, repr(float(p.b)), repr(float(p.delta)), repr(float(p.Delta)),
                    repr(float(p.te)), "" if p.direction_index is None else p.direction_index,
                    int(p.is_b0)])
    return buf.getvalue()


def read_scheme(path) -> AcquisitionScheme:
    """Parse a scheme CSV. b0 pairing is rebuilt from echo times."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"scheme file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(h.strip() for h in rows[0]) != SCHEME_HEADER:
        raise SchemeError(f"{path}: header must be {','.join(SCHEME_HEADER)}")
    points = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            idx, b, d, D, te, direction, is_b0 = row
            if int(idx) != len(points):
                raise SchemeError(f"{path}:{n}: index {idx} out of sequence")
            points.append(AcquisitionPoint(
                float(b), float(d), float(D), float(te),
                None if direction.strip() == "" else int(direction),
                bool(int(is_b0)),
            ))
        except (ValueError, TypeError) as exc:
            raise SchemeError(f"{path}:{n}: {exc}") from None
    return AcquisitionScheme(points)


@dataclass
class VoxelTable:
    """Normalised per-voxel signal vectors for the masked voxels of a volume."""

    signals: np.ndarray
    voxel_indices: np.ndarray
    dims: tuple

    def __post_init__(self):
        self.signals = np.atleast_2d(np.asarray(self.signals, dtype=float))
        self.voxel_indices = np.asarray(self.voxel_indices, dtype=np.int64)
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.voxel_indices) != self.signals.shape[0]:
            raise ValueError("one voxel index per signal row required")
        if not np.all(np.isfinite(self.signals)):
            raise ValueError("voxel table signals must be finite")
        if np.any(np.diff(self.voxel_indices) <= 0):
            raise ValueError("voxel indices must be strictly increasing")
        if len(self.voxel_indices) and (self.voxel_indices[0] < 0
                                        or self.voxel_indices[-1] >= int(np.prod(self.dims))):
            raise ValueError("voxel index outside the source volume")

    @property
    def n_voxels(self) -> int:
        return self.signals.shape[0]

    @property
    def n_meas(self) -> int:
        return self.signals.shape[1]
