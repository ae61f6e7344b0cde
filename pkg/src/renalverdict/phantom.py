"""Synthetic phantoms with known ground truth, and a Monte Carlo oracle for
restricted diffusion in an impermeable sphere."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .acquisition import (AcquisitionPoint, AcquisitionScheme, VoxelTable, kidney_protocol,
                          normalize_and_average, normalize_directions, pulse_strength_factor)
from .models import FixedDiffusivities, ProtocolArrays, verdict_predict


@dataclass
class PhantomSpec:
    """Sampling recipe for a synthetic VERDICT phantom.

    Fractions are drawn uniformly on the simplex; radius uniformly in
    ``radius_range``. ``snr`` is the b0 signal-to-noise ratio (inf for none).
    """

    n_voxels: int = 1000
    radius_range: tuple = (5.0, 15.0)
    scheme: Optional[AcquisitionScheme] = None
    snr: float = math.inf
    seed: int = 0
    fixed: FixedDiffusivities = field(default_factory=FixedDiffusivities)

    def __post_init__(self):
        if self.n_voxels < 1:
            raise ValueError("n_voxels must be >= 1")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius range {self.radius_range}")
        if not self.snr > 0:
            raise ValueError("snr must be positive (or inf)")


@dataclass
class GroundTruth:
    f_ic: np.ndarray
    f_ees: np.ndarray
    radius: np.ndarray
    sigma: float
    seed: int

    @property
    def f_vasc(self):
        return 1.0 - self.f_ic - self.f_ees

    def to_csv(self) -> str:
        lines = ["voxel,f_ic,f_ees,f_vasc,R_um"]
        for i, (a, b, c, r) in enumerate(zip(self.f_ic, self.f_ees, self.f_vasc, self.radius)):
            lines.append(f"{i},{a:.9g},{b:.9g},{c:.9g},{r:.9g}")
        return "\n".join(lines) + "\n"


def add_rician_noise(signal, snr, rng):
    """Magnitude of the signal plus complex Gaussian noise, sigma = 1/snr."""
    signal = np.asarray(signal, dtype=float)
    if math.isinf(snr):
        return signal.copy()
    if snr <= 0:
        raise ValueError("snr must be positive")
    sigma = 1.0 / snr
    n1 = rng.normal(0.0, sigma, signal.shape)
    n2 = rng.normal(0.0, sigma, signal.shape)
    return np.sqrt((signal + n1) ** 2 + n2 ** 2)


def sample_tissue(n, radius_range, rng):
    fr = rng.dirichlet((1.0, 1.0, 1.0), size=n)
    radius = rng.uniform(radius_range[0], radius_range[1], size=n)
    return fr[:, 0], fr[:, 1], radius


def simulate_raw(f_ic, f_ees, radius, scheme, fixed, snr, rng):
    """Noisy raw measurements for every entry of ``scheme`` (b0 = 1)."""
    clean = verdict_predict(f_ic, f_ees, radius, ProtocolArrays(scheme), fixed)
    return add_rician_noise(clean, snr, rng)


def generate_phantom(spec: PhantomSpec, return_raw=False):
    """Draw a phantom and return ``(VoxelTable, GroundTruth)``.

    Signals are generated per acquisition entry, noise is added to every
    entry including the b0s, and the table holds the normalised,
    direction-averaged vectors. Voxels whose b0 falls to zero under noise are
    regenerated from the same stream, so the table always has n_voxels rows.
    """
    scheme = spec.scheme or kidney_protocol()
    rng = np.random.default_rng(spec.seed)
    f_ic, f_ees, radius = sample_tissue(spec.n_voxels, spec.radius_range, rng)
    raw = simulate_raw(f_ic, f_ees, radius, scheme, spec.fixed, spec.snr, rng)
    signals, valid = normalize_and_average(raw, scheme)
    while not valid.all():
        bad = ~valid
        raw[bad] = simulate_raw(f_ic[bad], f_ees[bad], radius[bad], scheme, spec.fixed, spec.snr, rng)
        signals[bad], valid[bad] = normalize_and_average(raw[bad], scheme)
    table = VoxelTable(signals, np.arange(spec.n_voxels), (spec.n_voxels, 1, 1))
    truth = GroundTruth(f_ic, f_ees, radius, 0.0 if math.isinf(spec.snr) else 1.0 / spec.snr, spec.seed)
    if return_raw:
        return table, truth, raw
    return table, truth


# ---------------------------------------------------------------------------
# planted-information phantom for the protocol selector

def planted_subjects(n_subjects, n_voxels, planted_b=(70.0, 150.0, 1000.0, 2000.0),
                     scheme=None, background_sigma=0.01, seed=0):
    """Direction-level (27-measurement) tables where only the planted shells
    vary from voxel to voxel.

    Each measurement of a planted shell carries its own independent latent
    value; every other shell is a fixed value plus small noise, so it holds
    no information about anything but itself.

    Returns ``(tables, planted_indices)`` where ``tables`` is a list of
    (n_voxels, n_dw) arrays.
    """
    scheme = scheme or kidney_protocol()
    dw = scheme.dw_indices
    b = np.array([scheme.points[i].b for i in dw])
    planted = np.isin(b, np.asarray(planted_b, dtype=float))
    rng = np.random.default_rng(seed)
    base = np.exp(-b * 1e-3)
    tables = []
    for _ in range(n_subjects):
        x = np.tile(base, (n_voxels, 1))
        x += background_sigma * rng.standard_normal(x.shape)
        latent = rng.uniform(-0.25, 0.25, size=(n_voxels, int(planted.sum())))
        x[:, planted] = base[planted] + latent
        tables.append(x)
    return tables, np.flatnonzero(planted)


# ---------------------------------------------------------------------------
# Monte Carlo oracle

@dataclass
class MCResult:
    signal: float
    stderr: float
    n_walkers: int
    n_steps: int


@njit(cache=True)
def _advance(pos, step, r2, ax, weight, phase):
    """Move every walker by its step with specular reflection at the wall
    and accumulate ``weight`` times the midpoint projection into ``phase``."""
    radius = math.sqrt(r2)
    for i in range(pos.shape[0]):
        x, y, z = pos[i, 0], pos[i, 1], pos[i, 2]
        p0 = x * ax[0] + y * ax[1] + z * ax[2]
        sx, sy, sz = step[i, 0], step[i, 1], step[i, 2]
        for _ in range(32):
            nx, ny, nz = x + sx, y + sy, z + sz
            if nx * nx + ny * ny + nz * nz <= r2:
                x, y, z = nx, ny, nz
                sx = sy = sz = 0.0
                break
            a = sx * sx + sy * sy + sz * sz
            bq = 2.0 * (x * sx + y * sy + z * sz)
            c = x * x + y * y + z * z - r2
            t = (-bq + math.sqrt(max(bq * bq - 4.0 * a * c, 0.0))) / (2.0 * a)
            t = min(max(t, 0.0), 1.0)
            hx, hy, hz = x + t * sx, y + t * sy, z + t * sz
            nrm = math.sqrt(hx * hx + hy * hy + hz * hz)
            ux, uy, uz = hx / nrm, hy / nrm, hz / nrm
            rx, ry, rz = (1.0 - t) * sx, (1.0 - t) * sy, (1.0 - t) * sz
            dot = rx * ux + ry * uy + rz * uz
            sx, sy, sz = rx - 2.0 * dot * ux, ry - 2.0 * dot * uy, rz - 2.0 * dot * uz
            # restart a hair inside so the wall is not detected again
            x, y, z = hx * (1.0 - 1e-12), hy * (1.0 - 1e-12), hz * (1.0 - 1e-12)
        if sx != 0.0 or sy != 0.0 or sz != 0.0:
            # pathological leftover: project back inside
            x, y, z = x + sx, y + sy, z + sz
            nrm = math.sqrt(x * x + y * y + z * z)
            if nrm > radius:
                f = radius * (1.0 - 1e-12) / nrm
                x, y, z = x * f, y * f, z * f
        pos[i, 0], pos[i, 1], pos[i, 2] = x, y, z
        if weight != 0.0:
            phase[i] += weight * 0.5 * (p0 + x * ax[0] + y * ax[1] + z * ax[2])


def _lobe_overlap(t0, t1, start, stop):
    return max(0.0, min(t1, stop) - max(t0, start))


def mc_sphere_signal(radius, d, point: AcquisitionPoint, n_walkers=200_000, dt=None, seed=0,
                     axis=(1.0, 0.0, 0.0), n_chunks=8) -> MCResult:
    """Random-walk estimate of the PGSE signal from an impermeable sphere.

    Walkers start uniformly inside the sphere and take Gaussian steps of
    variance 2 d dt per axis, reflecting specularly at the wall (the
    overshoot is mirrored about the wall normal, repeatedly if it exits
    again). The phase is accumulated against two rectangular lobes of
    opposite sign (duration ``delta``, separation ``Delta``), with gamma*G
    from the acquisition's b.

    ``dt`` defaults to the largest step satisfying sqrt(6 d dt) <= R/10.
    The walkers are split into ``n_chunks`` independently seeded groups,
    reduced in a fixed order.
    """
    return mc_sphere_signals(radius, d, [point], n_walkers, dt, seed, axis, n_chunks)[0]


def _check_mc(radius, d, n_walkers, dt):
    if radius <= 0 or d <= 0:
        raise ValueError("radius and diffusivity must be positive")
    if n_walkers < 10_000:
        raise ValueError("need at least 1e4 walkers")
    max_dt = (radius / 10.0) ** 2 / (6.0 * d)
    if dt is None:
        dt = max_dt
    if not dt > 0 or math.sqrt(6.0 * d * dt) > radius / 10.0 * (1 + 1e-12):
        raise ValueError(f"dt={dt} too large: step must stay below radius/10 (dt <= {max_dt:.4g})")
    return dt


def mc_sphere_signals(radius, d, points, n_walkers=200_000, dt=None, seed=0,
                      axis=(1.0, 0.0, 0.0), n_chunks=8) -> list:
    """``mc_sphere_signal`` for several points.

    Points with the same (delta, Delta) share one set of walks, since only
    the gradient strength differs between them; every estimate still uses
    ``n_walkers`` walkers and the same seed gives the same result as a
    single-point call.
    """
    dt = _check_mc(radius, d, n_walkers, dt)
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    results = [None] * len(points)
    groups = {}
    for i, p in enumerate(points):
        total = p.Delta + p.delta
        n_steps = int(math.ceil(total / dt))
        if p.is_b0 or p.b == 0:
            results[i] = MCResult(1.0, 0.0, n_walkers, n_steps)
        else:
            groups.setdefault((p.delta, p.Delta), []).append(i)
    for (delta, Delta), members in groups.items():
        total = Delta + delta
        n_steps = int(math.ceil(total / dt))
        h = total / n_steps
        weights = np.empty(n_steps)
        for k in range(n_steps):
            t0, t1 = k * h, (k + 1) * h
            weights[k] = (_lobe_overlap(t0, t1, 0.0, delta)
                          - _lobe_overlap(t0, t1, Delta, Delta + delta))
        gammas = np.array([math.sqrt(pulse_strength_factor(points[i])) for i in members])
        sums = np.zeros((2, len(members)))
        for phase in _walk_phases(radius, d, h, weights, axis, n_walkers, seed, n_chunks):
            for j, g in enumerate(gammas):
                c = np.cos(g * phase)
                sums[0, j] += c.sum()
                sums[1, j] += (c * c).sum()
        for j, i in enumerate(members):
            mean = sums[0, j] / n_walkers
            var = max(sums[1, j] / n_walkers - mean * mean, 0.0)
            results[i] = MCResult(float(mean), math.sqrt(var / n_walkers), n_walkers, n_steps)
    return results


def _walk_phases(radius, d, h, weights, axis, n_walkers, seed, n_chunks):
    """Yield the accumulated phase (divided by gamma*G) of each walker chunk."""
    sigma = math.sqrt(2.0 * d * h)
    r2 = float(radius) ** 2
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    sizes = [n_walkers // n_chunks + (1 if i < n_walkers % n_chunks else 0) for i in range(n_chunks)]
    for child, m in zip(children, sizes):
        rng = np.random.default_rng(child)
        u = rng.standard_normal((m, 3))
        u /= np.linalg.norm(u, axis=1)[:, None]
        pos = u * (radius * rng.random(m) ** (1.0 / 3.0))[:, None]
        phase = np.zeros(m)
        step = np.empty((m, 3))
        for k in range(weights.shape[0]):
            rng.standard_normal(out=step)
            step *= sigma
            _advance(pos, step, r2, axis, weights[k], phase)
        yield phase


def direction_table(raw, scheme):
    """Direction-level ratios (n_voxels, n_dw) with validity flags."""
    return normalize_directions(raw, scheme)
