"""Initial measures, histogram estimators, and comparison metrics.

The stationary measure of the collision map has density cos(phi) in
(r, phi) on each scatterer, normalized by twice the total perimeter.
Initial ensembles are drawn from that measure directly (inverse CDF in
phi) or reweighted by a positive Lipschitz factor via rejection.

Empirical measures live on a product grid: per scatterer, r_bins equal
arclength cells times phi_bins equal angle cells.  The analytic bin
masses of the stationary measure are proportional to dr * d(sin phi),
which gives an exact reference histogram for convergence tests at any
resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import billiard_map as _bmap
from . import holes as _holes
from .errors import (
    ConfigError,
    EmptySurvivorSetError,
    GridMismatchError,
    InvalidArgumentError,
)


def nu_density(table, phi):
    """Stationary density in (r, phi) coordinates."""
    return np.cos(phi) / (2.0 * table.total_perimeter)


@dataclass(frozen=True)
class DensitySpec:
    """Positive Lipschitz reweighting of the stationary measure.

    kind "nu" is the stationary measure itself.  "arc_cosine" modulates
    along the boundary, psi = 1 + amp*cos(2*pi*r/perimeter + phase);
    "angle_ramp" tilts in the angle, psi = 1 + amp*(2*phi/pi).  Both
    need |amp| < 1 so the density stays bounded away from zero.
    """

    kind: str = "nu"
    amp: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("nu", "arc_cosine", "angle_ramp"):
            raise InvalidArgumentError(f"unknown density kind {self.kind!r}")
        if self.kind != "nu" and not abs(self.amp) < 1.0:
            raise InvalidArgumentError("need |amp| < 1 for a positive density")

    def weight(self, table, sid, r, phi):
        """Density relative to the stationary measure, sup-normalized by sup_weight."""
        if self.kind == "nu":
            return np.ones_like(np.asarray(r, dtype=float))
        if self.kind == "arc_cosine":
            perim = table.perimeters[np.asarray(sid, dtype=np.int64)]
            return 1.0 + self.amp * np.cos(
                2.0 * np.pi * np.asarray(r) / perim + self.phase
            )
        return 1.0 + self.amp * (2.0 * np.asarray(phi) / np.pi)

    @property
    def sup_weight(self) -> float:
        return 1.0 if self.kind == "nu" else 1.0 + abs(self.amp)


def density_from_json(obj) -> DensitySpec:
    try:
        return DensitySpec(
            kind=obj.get("kind", "nu"),
            amp=float(obj.get("amp", 0.0)),
            phase=float(obj.get("phase", 0.0)),
        )
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"malformed density spec: {exc}") from exc


def density_to_json(spec: DensitySpec) -> dict:
    return {"kind": spec.kind, "amp": float(spec.amp), "phase": float(spec.phase)}


def sample_nu(table, n: int, rng):
    """Draw n states from the stationary measure; returns (sid, r, phi)."""
    if n <= 0:
        raise InvalidArgumentError("sample size must be positive")
    u = rng.random(n) * table.total_perimeter
    # cum_perimeter starts at 0; clip because u can round onto the top edge
    sid = np.clip(
        np.searchsorted(table.cum_perimeter, u, side="right") - 1,
        0, len(table) - 1,
    ).astype(np.int64)
    r = np.mod(rng.random(n) * table.perimeters[sid], table.perimeters[sid])
    phi = np.arcsin(2.0 * rng.random(n) - 1.0)
    return sid, r, phi


def sample_initial(table, spec: DensitySpec, n: int, rng):
    """Draw n states with law psi d(nu) by rejection; deterministic given rng."""
    if spec.kind == "nu":
        return sample_nu(table, n, rng)
    out_sid = np.empty(n, dtype=np.int64)
    out_r = np.empty(n)
    out_phi = np.empty(n)
    filled = 0
    sup = spec.sup_weight
    while filled < n:
        m = int((n - filled) * sup * 1.2) + 64
        sid, r, phi = sample_nu(table, m, rng)
        acc = rng.random(m) < spec.weight(table, sid, r, phi) / sup
        take = min(int(acc.sum()), n - filled)
        idx = np.flatnonzero(acc)[:take]
        out_sid[filled:filled + take] = sid[idx]
        out_r[filled:filled + take] = r[idx]
        out_phi[filled:filled + take] = phi[idx]
        filled += take
    return out_sid, out_r, out_phi


@dataclass
class EmpiricalMeasure:
    """Weighted histogram on the (scatterer, r, phi) product grid."""

    weights: np.ndarray  # shape (n_scatterers, r_bins, phi_bins)

    @property
    def r_bins(self) -> int:
        return self.weights.shape[1]

    @property
    def phi_bins(self) -> int:
        return self.weights.shape[2]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def normalized(self) -> "EmpiricalMeasure":
        mass = self.total_mass
        if mass <= 0.0:
            raise EmptySurvivorSetError("cannot normalize a zero-mass histogram")
        return EmpiricalMeasure(self.weights / mass)


def bin_measure(table, sid, r, phi, r_bins: int, phi_bins: int,
               weights=None) -> EmpiricalMeasure:
    """Histogram phase states; bins are equal in r and in phi."""
    if r_bins <= 0 or phi_bins <= 0:
        raise InvalidArgumentError("bin counts must be positive")
    sid = np.asarray(sid, dtype=np.int64)
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    s = len(table)
    ir = np.clip(
        (r / table.perimeters[sid] * r_bins).astype(np.int64), 0, r_bins - 1
    )
    iphi = np.clip(
        ((phi + 0.5 * np.pi) / np.pi * phi_bins).astype(np.int64), 0, phi_bins - 1
    )
    flat = (sid * r_bins + ir) * phi_bins + iphi
    counts = np.bincount(flat, weights=weights, minlength=s * r_bins * phi_bins)
    return EmpiricalMeasure(counts.reshape(s, r_bins, phi_bins).astype(float))


def nu_measure(table, r_bins: int, phi_bins: int) -> EmpiricalMeasure:
    """Exact bin masses of the stationary measure on the same grid."""
    edges = np.linspace(-0.5 * np.pi, 0.5 * np.pi, phi_bins + 1)
    phi_mass = np.diff(np.sin(edges))  # integral of cos over each angle cell
    r_mass = table.perimeters / r_bins  # equal cells in arclength
    w = r_mass[:, None, None] * np.broadcast_to(
        phi_mass[None, None, :], (len(table), r_bins, phi_bins)
    )
    return EmpiricalMeasure(np.ascontiguousarray(w) / (2.0 * table.total_perimeter))


def measure_distance(m1: EmpiricalMeasure, m2: EmpiricalMeasure) -> float:
    """Total variation style L1 distance between normalized histograms."""
    if m1.weights.shape != m2.weights.shape:
        raise GridMismatchError(
            f"grid shapes differ: {m1.weights.shape} vs {m2.weights.shape}"
        )
    for m in (m1, m2):
        if abs(m.total_mass - 1.0) > 1e-9:
            raise InvalidArgumentError(
                "l1_distance expects normalized measures; call .normalized()"
            )
    return float(np.abs(m1.weights - m2.weights).sum())


def noise_floor(table, n: int, r_bins: int, phi_bins: int, master_seed: int,
                reps: int = 3) -> float:
    """Sampling-noise baseline: mean distance of paired fresh nu samples."""
    from .streams import stream

    if reps <= 0:
        raise InvalidArgumentError("reps must be positive")
    dists = []
    for rep in range(reps):
        ma = bin_measure(
            table, *sample_nu(table, n, stream(master_seed, "noise-floor", rep, "a")),
            r_bins, phi_bins,
        ).normalized()
        mb = bin_measure(
            table, *sample_nu(table, n, stream(master_seed, "noise-floor", rep, "b")),
            r_bins, phi_bins,
        ).normalized()
        dists.append(measure_distance(ma, mb))
    return float(np.mean(dists))


def pushforward_residual(table, hole, sid, r, phi, r_bins: int, phi_bins: int,
                         offsets=None):
    """Stationarity residual of a particle set under one open step.

    Returns (distance, mass_ratio, n_censored): the L1 distance between
    the normalized histogram of the input states and the normalized
    histogram of their surviving images, plus the surviving fraction of
    the uncensored population.  Small distance and mass_ratio close to
    the expected per-step survival indicate an approximately conditionally
    stationary set.
    """
    sid = np.asarray(sid, dtype=np.int64)
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if hole is not None and hole.kind == "II" and offsets is None:
        offsets = _holes.hole_image_offsets(table, hole)
    batch = _bmap.collide_batch(table, sid, r, phi)
    alive = ~batch.censored
    if hole is not None:
        esc = _holes.arrival_escape_mask(table, hole, batch, offsets)
        alive &= ~esc
    n_cens = int(batch.censored.sum())
    n_risk = len(sid) - n_cens
    if n_risk <= 0 or not np.any(alive):
        raise EmptySurvivorSetError("no uncensored survivors after one step")
    before = bin_measure(table, sid[~batch.censored], r[~batch.censored],
                        phi[~batch.censored], r_bins, phi_bins).normalized()
    after = bin_measure(table, batch.scatterer_id[alive], batch.r[alive],
                       batch.phi[alive], r_bins, phi_bins).normalized()
    return measure_distance(before, after), float(alive.sum()) / n_risk, n_cens
