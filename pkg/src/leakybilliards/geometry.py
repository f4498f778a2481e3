"""Scatterer tables on the unit torus and horizon certification.

The billiard domain is the unit two-torus minus a finite union of
disjoint closed disks (scatterers).  A boundary point on scatterer i is
addressed by arc length r in [0, 2*pi*rho_i), measured counterclockwise
from the positive x axis of the disk, so its position is
center + rho*(cos(r/rho), sin(r/rho)) and the domain-inward normal is
the radial unit vector pointing away from the center.

Horizon certification is exact: a free corridor (an infinite strip of
positive width avoiding every scatterer image) must have a rational
direction, because for irrational directions the lattice of scatterer
images projects densely onto the normal line.  A direction (p, q) with
sqrt(p^2+q^2) >= 1/(2*r_max) is blocked by the widest scatterer alone,
so sweeping the finitely many rational directions below that cutoff
decides horizon finiteness.  The flight bound L_max is then estimated
by dense ray casting and padded, and every collision the package ever
computes is checked against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    BadScattererIdError,
    ConfigError,
    InfiniteHorizonError,
    InvalidArgumentError,
    OverlappingScatterersError,
    ROutOfRangeError,
)
from .streams import stream

# impact parameters within this band of a scatterer radius mark the ray
# as grazing; the collision search refuses to resolve which side of the
# tangency the trajectory passes on
GRAZE_TOLERANCE = 1e-12

# minimum admissible flight length; guards against rounding re-hits of
# the departure disk's neighbors
_T_EPS = 1e-12

# a projection gap narrower than this does not count as a corridor
_GAP_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Scatterer:
    """Closed disk obstacle with center in the unit cell."""

    center: tuple[float, float]
    radius: float

    @property
    def perimeter(self) -> float:
        return 2.0 * math.pi * self.radius


@dataclass(frozen=True)
class TablePoint:
    """A boundary point in the plane with the domain-inward normal."""

    scatterer_id: int
    position: tuple[float, float]
    inward_normal: tuple[float, float]


@dataclass(frozen=True)
class HorizonCertificate:
    """Outcome of a successful finite-horizon probe.

    l_max bounds every free flight in the table (padded estimate from
    ray casting); q_checked is the direction sweep range actually used,
    always large enough to make the corridor test a complete decision
    procedure.
    """

    l_max: float
    q_checked: int
    rays_cast: int
    longest_observed: float


class Table:
    """Validated scatterer configuration with precomputed kernel arrays.

    Construction wraps centers into [0,1)^2 and checks pairwise
    disjointness across periodic images.  The horizon certificate is
    attached by validate_table; kernels that need a flight bound refuse
    to run without it unless an explicit reach is supplied.
    """

    def __init__(self, scatterers):
        scatterers = tuple(scatterers)
        if not scatterers:
            raise InvalidArgumentError("table needs at least one scatterer")
        wrapped = []
        for s in scatterers:
            if not (0.0 < s.radius < 0.5):
                raise InvalidArgumentError(
                    f"scatterer radius must lie in (0, 0.5), got {s.radius}"
                )
            wrapped.append(
                Scatterer((s.center[0] % 1.0, s.center[1] % 1.0), float(s.radius))
            )
        self.scatterers = tuple(wrapped)
        self.centers = np.array([s.center for s in self.scatterers], dtype=float)
        self.radii = np.array([s.radius for s in self.scatterers], dtype=float)
        self.perimeters = 2.0 * np.pi * self.radii
        self.total_perimeter = float(self.perimeters.sum())
        self.cum_perimeter = np.concatenate([[0.0], np.cumsum(self.perimeters)])
        self.certificate: HorizonCertificate | None = None
        self._candidates = {}
        self._check_disjoint()

    def __len__(self):
        return len(self.scatterers)

    def _check_disjoint(self):
        n = len(self.scatterers)
        offsets = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]
        for i in range(n):
            for j in range(i + 1, n):
                need = self.radii[i] + self.radii[j]
                for dx, dy in offsets:
                    d = math.hypot(
                        self.centers[i, 0] - self.centers[j, 0] + dx,
                        self.centers[i, 1] - self.centers[j, 1] + dy,
                    )
                    if d <= need:
                        raise OverlappingScatterersError(
                            f"scatterers {i} and {j} touch at image offset ({dx},{dy}): "
                            f"distance {d:.6g} <= {need:.6g}"
                        )
        # radius < 1/2 already makes every disk disjoint from its own images

    def image_candidates(self, reach: float):
        """Scatterer images reachable by a ray of length <= reach.

        Rays launched inside the package start on scatterer boundaries
        with centers in the unit cell, hence within d0 = sqrt(2)/2 +
        r_max of the cell midpoint.  Returns (offsets (M,2), ids (M,),
        lower_bounds (M,)) sorted by the distance lower bound, which is
        what lets the first-hit scan settle most rays after the nearest
        few images.
        """
        key = round(float(reach), 6)
        if key in self._candidates:
            return self._candidates[key]
        d0 = math.sqrt(0.5) + float(self.radii.max())
        kmax = int(math.ceil(reach + d0 + 1.0))
        offs, sids, lbs = [], [], []
        for kx in range(-kmax, kmax + 1):
            for ky in range(-kmax, kmax + 1):
                for j in range(len(self.scatterers)):
                    cx = self.centers[j, 0] + kx
                    cy = self.centers[j, 1] + ky
                    lb = math.hypot(cx - 0.5, cy - 0.5) - self.radii[j] - d0
                    if lb <= reach:
                        offs.append((float(kx), float(ky)))
                        sids.append(j)
                        lbs.append(max(lb, 0.0))
        order = np.argsort(np.array(lbs), kind="stable")
        out = (
            np.array(offs)[order],
            np.array(sids, dtype=np.int64)[order],
            np.array(lbs)[order],
        )
        self._candidates[key] = out
        return out


def boundary_point(table: Table, scatterer_id: int, r: float) -> TablePoint:
    """Planar position and inward normal for arc-length coordinate r."""
    sid = int(scatterer_id)
    if not 0 <= sid < len(table):
        raise BadScattererIdError(f"no scatterer with id {scatterer_id}")
    perim = table.perimeters[sid]
    if not (0.0 <= r < perim) or not math.isfinite(r):
        raise ROutOfRangeError(
            f"r={r} outside [0, {perim}) on scatterer {sid}"
        )
    rho = table.radii[sid]
    psi = r / rho
    nx, ny = math.cos(psi), math.sin(psi)
    cx, cy = table.centers[sid]
    return TablePoint(sid, (cx + rho * nx, cy + rho * ny), (nx, ny))


def rays_from_boundary(table: Table, sid, r, phi):
    """Vectorized launch data for boundary states.

    phi is the angle from the inward normal, positive toward the
    counterclockwise tangent; |phi| < pi/2 points into the domain.
    Returns (p0 (N,2), v (N,2)) with unit directions.
    """
    sid = np.asarray(sid, dtype=np.int64)
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    rho = table.radii[sid]
    psi = r / rho
    nx, ny = np.cos(psi), np.sin(psi)
    p0 = np.empty(sid.shape + (2,), dtype=float)
    p0[..., 0] = table.centers[sid, 0] + rho * nx
    p0[..., 1] = table.centers[sid, 1] + rho * ny
    cphi, sphi = np.cos(phi), np.sin(phi)
    v = np.empty_like(p0)
    v[..., 0] = cphi * nx - sphi * ny
    v[..., 1] = cphi * ny + sphi * nx
    return p0, v


def first_hit_batch(table: Table, p0, v, skip_sid=None, reach=None):
    """First intersection of rays with the scatterer image lattice.

    Parameters
    ----------
    p0, v : (N,2) arrays
        Ray origins (within the inflated unit cell) and unit directions.
    skip_sid : (N,) int array, optional
        Scatterer whose (0,0) image is excluded per ray; pass the id the
        ray departs from so rounding cannot produce a zero-length hit.
    reach : float, optional
        Search horizon; defaults to the table certificate's l_max.

    Returns
    -------
    t, sid, offset, grazed
        Flight lengths (inf where nothing was hit within reach),
        scatterer ids (-1 for no hit), integer image offsets (N,2), and
        a flag for rays passing within GRAZE_TOLERANCE of a circle they
        did not hit, ahead of the accepted hit.
    """
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n = p0.shape[0]
    if reach is None:
        if table.certificate is None:
            raise InvalidArgumentError("table has no horizon certificate; pass reach")
        reach = table.certificate.l_max
    offs, sids, lbs = table.image_candidates(reach)
    centers, radii = table.centers, table.radii

    best_t = np.full(n, np.inf)
    best_sid = np.full(n, -1, dtype=np.int64)
    best_off = np.zeros((n, 2))
    maybe_graze = np.zeros(n, dtype=bool)
    active = np.arange(n)
    if skip_sid is not None:
        skip_sid = np.asarray(skip_sid, dtype=np.int64)

    chunk = 12
    i = 0
    m = len(sids)
    while i < m and active.size:
        hi = min(i + chunk, m)
        pa = p0[active]
        va = v[active]
        bt = best_t[active]
        bs = best_sid[active]
        bo = best_off[active]
        mg = maybe_graze[active]
        ska = skip_sid[active] if skip_sid is not None else None
        for c in range(i, hi):
            j = sids[c]
            ox, oy = offs[c]
            rho = radii[j]
            fx = pa[:, 0] - (centers[j, 0] + ox)
            fy = pa[:, 1] - (centers[j, 1] + oy)
            b = 2.0 * (fx * va[:, 0] + fy * va[:, 1])
            cc = fx * fx + fy * fy - rho * rho
            disc = b * b - 4.0 * cc
            hit = disc > 0.0
            tsm = 0.5 * (-b - np.sqrt(np.where(hit, disc, 0.0)))
            ok = hit & (tsm > _T_EPS) & (tsm < bt)
            if ska is not None and ox == 0.0 and oy == 0.0:
                ok &= ska != j
            if np.any(ok):
                bt = np.where(ok, tsm, bt)
                bs = np.where(ok, j, bs)
                bo[ok, 0] = ox
                bo[ok, 1] = oy
            # loose pre-screen; the exact grazing test reruns flagged rays
            imp = np.sqrt(np.maximum(cc + rho * rho - 0.25 * b * b, 0.0))
            mg |= (np.abs(imp - rho) < 1e-9) & (-0.5 * b > _T_EPS)
        best_t[active] = bt
        best_sid[active] = bs
        best_off[active] = bo
        maybe_graze[active] = mg
        if hi < m:
            active = active[bt > lbs[hi]]
        i = hi

    grazed = np.zeros(n, dtype=bool)
    flagged = np.flatnonzero(maybe_graze)
    for idx in flagged:
        tb = best_t[idx]
        if not np.isfinite(tb):
            grazed[idx] = True
            continue
        for c in range(m):
            j = sids[c]
            rho = radii[j]
            fx = p0[idx, 0] - (centers[j, 0] + offs[c, 0])
            fy = p0[idx, 1] - (centers[j, 1] + offs[c, 1])
            bq = 2.0 * (fx * v[idx, 0] + fy * v[idx, 1])
            t_close = -0.5 * bq
            if not (_T_EPS < t_close < tb):
                continue  # the accepted hit's own chord midpoint lies beyond tb
            imp2 = fx * fx + fy * fy - t_close * t_close
            if abs(math.sqrt(max(imp2, 0.0)) - rho) < GRAZE_TOLERANCE:
                grazed[idx] = True
                break
    return best_t, best_sid, best_off, grazed


def _corridor_witness(centers, radii, q_sweep):
    """Direction (p, q) of a free corridor, or None if all are blocked."""
    r_max = float(radii.max())
    cutoff = 1.0 / (2.0 * r_max)
    q_eff = max(q_sweep, int(math.ceil(cutoff)))
    directions = [(1, 0), (0, 1)]
    for p in range(1, q_eff + 1):
        for q in range(1, q_eff + 1):
            directions.append((p, q))
            directions.append((p, -q))
    for p, q in directions:
        if math.gcd(p, abs(q)) != 1:
            continue
        norm = math.hypot(p, q)
        if norm >= cutoff:
            continue  # the widest scatterer blocks these outright
        spacing = 1.0 / norm
        nx, ny = -q / norm, p / norm
        proj = centers[:, 0] * nx + centers[:, 1] * ny
        if np.any(2.0 * radii >= spacing - _GAP_TOLERANCE):
            continue
        starts = np.mod(proj - radii, spacing)
        lengths = 2.0 * radii
        order = np.argsort(starts)
        starts, lengths = starts[order], lengths[order]
        cur_end = starts[0] + lengths[0]
        gap = False
        for s, ln in zip(starts[1:], lengths[1:]):
            if s > cur_end + _GAP_TOLERANCE:
                gap = True
                break
            cur_end = max(cur_end, s + ln)
        if not gap and starts[0] + spacing > cur_end + _GAP_TOLERANCE:
            gap = True
        if gap:
            return (p, q)
    return None


def finite_horizon_probe(
    table: Table,
    q_max: int = 8,
    n_rays: int = 1_000_000,
    length_budget: float = 8.0,
    seed: int = 20260817,
) -> HorizonCertificate:
    """Certify finite horizon and bound the free flight length.

    Raises InfiniteHorizonError with the witness direction if any
    rational-direction corridor is open.  Otherwise casts n_rays
    boundary rays (uniform arc length, cosine-law angles), checks none
    exceeds length_budget, and returns a certificate whose l_max is the
    longest observed flight padded by 5% plus 0.05.
    """
    if q_max < 1:
        raise InvalidArgumentError(f"q_max must be >= 1, got {q_max}")
    if n_rays < 1000:
        raise InvalidArgumentError(f"n_rays must be >= 1000, got {n_rays}")
    if length_budget <= 0:
        raise InvalidArgumentError("length_budget must be positive")
    witness = _corridor_witness(table.centers, table.radii, q_max)
    if witness is not None:
        raise InfiniteHorizonError(
            f"free corridor in direction {witness}", witness=witness
        )
    r_max = float(table.radii.max())
    q_eff = max(q_max, int(math.ceil(1.0 / (2.0 * r_max))))

    rng = stream(seed, "horizon-probe")
    u = rng.random(n_rays)
    g = rng.random(n_rays) * table.total_perimeter
    sid = np.searchsorted(table.cum_perimeter, g, side="right") - 1
    sid = np.clip(sid, 0, len(table) - 1)
    r = g - table.cum_perimeter[sid]
    phi = np.arcsin(2.0 * u - 1.0)
    p0, v = rays_from_boundary(table, sid, r, phi)
    t, hit_sid, _, _ = first_hit_batch(
        table, p0, v, skip_sid=sid, reach=length_budget
    )
    if np.any(hit_sid < 0):
        raise InvalidArgumentError(
            "a probe ray exceeded length_budget although no corridor exists; "
            "increase length_budget"
        )
    longest = float(t.max())
    l_max = longest * 1.05 + 0.05
    return HorizonCertificate(
        l_max=l_max, q_checked=q_eff, rays_cast=int(n_rays), longest_observed=longest
    )


def validate_table(
    scatterers,
    q_max: int = 8,
    n_rays: int = 1_000_000,
    length_budget: float = 8.0,
    seed: int = 20260817,
) -> Table:
    """Build a Table, check disjointness, and attach a horizon certificate."""
    table = Table(scatterers)
    table.certificate = finite_horizon_probe(
        table, q_max=q_max, n_rays=n_rays, length_budget=length_budget, seed=seed
    )
    return table


def table_to_json(table: Table) -> dict:
    return {
        "scatterers": [
            {"center": [s.center[0], s.center[1]], "radius": s.radius}
            for s in table.scatterers
        ]
    }


def table_from_json(obj, **validate_kwargs) -> Table:
    try:
        scatterers = [
            Scatterer((float(s["center"][0]), float(s["center"][1])), float(s["radius"]))
            for s in obj["scatterers"]
        ]
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise ConfigError(f"malformed table spec: {exc}") from exc
    return validate_table(scatterers, **validate_kwargs)


@lru_cache(maxsize=1)
def _default_table_cached() -> Table:
    return validate_table(
        [Scatterer((0.0, 0.0), 0.4), Scatterer((0.5, 0.5), 0.2)]
    )


def default_table() -> Table:
    """The reference two-disk table used across tests and examples."""
    return _default_table_cached()
