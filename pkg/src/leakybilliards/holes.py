"""Hole specifications and membership predicates.

Two kinds of leak:

* Type I removes an open boundary arc on one scatterer together with
  its full angle fiber; a trajectory escapes when a collision lands in
  the arc.
* Type II is an open disk in the domain, disjoint from every scatterer
  image; a trajectory escapes when a free flight crosses the disk.
  Membership is attributed to the arrival state of that flight, so the
  hole in phase space is the forward image of the crossing set.

Predicates are pure geometry and never mutate state; near-tangential
inputs propagate the censoring of the underlying collision search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import billiard_map as _bmap
from . import geometry as _geo
from .errors import (
    BadScattererIdError,
    ConfigError,
    HoleTooLargeError,
    HoleTouchesScattererError,
    InvalidArgumentError,
    ROutOfRangeError,
)


@dataclass(frozen=True)
class HoleSpec:
    """Leak description; kind is "I" (boundary arc) or "II" (domain disk).

    Type I uses scatterer_id and arc=(a, b): the open arc running
    counterclockwise from a to b (mod perimeter), so a > b wraps through
    the seam at r = 0.  Type II uses center and radius.
    """

    kind: str
    scatterer_id: int | None = None
    arc: tuple[float, float] | None = None
    center: tuple[float, float] | None = None
    radius: float | None = None

    def __post_init__(self):
        if self.kind == "I":
            if self.scatterer_id is None or self.arc is None:
                raise InvalidArgumentError("Type I hole needs scatterer_id and arc")
            if self.arc[0] == self.arc[1]:
                raise InvalidArgumentError("arc endpoints must differ")
        elif self.kind == "II":
            if self.center is None or self.radius is None:
                raise InvalidArgumentError("Type II hole needs center and radius")
            if not self.radius > 0:
                raise InvalidArgumentError("hole radius must be positive")
        else:
            raise InvalidArgumentError(f"unknown hole kind {self.kind!r}")

    def arc_length(self, table) -> float:
        if self.kind != "I":
            raise InvalidArgumentError("arc_length applies to Type I holes")
        perim = table.perimeters[self.scatterer_id]
        a, b = self.arc
        return (b - a) % perim


def type_i_hole(table, scatterer_id: int, a: float, b: float) -> HoleSpec:
    """Boundary-arc hole; endpoints are taken mod the perimeter."""
    sid = int(scatterer_id)
    if not 0 <= sid < len(table):
        raise BadScattererIdError(f"no scatterer with id {scatterer_id}")
    perim = table.perimeters[sid]
    a, b = float(float(a) % perim), float(float(b) % perim)
    hole = HoleSpec(kind="I", scatterer_id=sid, arc=(a, b))
    if hole.arc_length(table) >= perim:
        raise HoleTooLargeError("arc covers the whole scatterer")
    return hole


def type_ii_hole(table, center, radius: float, check_clearance: bool = True) -> HoleSpec:
    """Domain-disk hole; with check_clearance it must avoid all scatterers."""
    hole = HoleSpec(
        kind="II", center=(float(center[0]), float(center[1])), radius=float(radius)
    )
    if check_clearance:
        _require_clearance(table, hole.center, hole.radius)
    return hole


def _require_clearance(table, center, radius):
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            d = np.hypot(
                table.centers[:, 0] + dx - center[0],
                table.centers[:, 1] + dy - center[1],
            )
            bad = d <= table.radii + radius
            if np.any(bad):
                j = int(np.flatnonzero(bad)[0])
                raise HoleTouchesScattererError(
                    f"hole disk at {center} r={radius:.6g} meets scatterer {j} "
                    f"(image offset ({dx},{dy}))"
                )


def hole_family(table, q0, h: float, offset: float = 0.0,
                kind: str | None = None) -> HoleSpec:
    """Concrete hole inside the h-neighborhood of the anchor q0.

    q0 = (scatterer_id, r) generates a Type I arc centered at r+offset
    with half-width h-|offset|; q0 = (x, y) generates a Type II disk at
    (x+offset, y) with radius h-|offset|.  Either way the hole nests
    inside the h-neighborhood of the anchor, so letting h shrink gives
    the shrinking families the estimators sweep over.  kind ("I"/"II")
    overrides the inference from the anchor's first slot.
    """
    if not h > 0:
        raise InvalidArgumentError("h must be positive")
    if abs(offset) >= h:
        raise HoleTooLargeError(f"|offset|={abs(offset)} leaves no room inside h={h}")
    half = h - abs(offset)
    if kind is None:
        kind = "I" if _is_boundary_anchor(q0) else "II"
    if kind not in ("I", "II"):
        raise InvalidArgumentError(f"unknown hole kind {kind!r}")
    if kind == "I":
        sid = int(q0[0])
        if not 0 <= sid < len(table):
            raise BadScattererIdError(f"no scatterer with id {sid}")
        perim = table.perimeters[sid]
        r0 = float(q0[1])
        if not 0.0 <= r0 < perim:
            raise ROutOfRangeError(f"anchor r={r0} outside [0, {perim})")
        if 2.0 * half >= perim:
            raise HoleTooLargeError(
                f"arc length {2 * half:.6g} >= perimeter {perim:.6g}"
            )
        c = r0 + offset
        return HoleSpec(kind="I", scatterer_id=sid, arc=(
            float((c - half) % perim), float((c + half) % perim)))
    center = (float(q0[0]) + offset, float(q0[1]))
    hole = HoleSpec(kind="II", center=center, radius=half)
    _require_clearance(table, hole.center, hole.radius)
    return hole


def _is_boundary_anchor(q0) -> bool:
    # boundary anchors are (scatterer_id, r) with an integral first slot
    return float(q0[0]) == int(q0[0]) and isinstance(q0[0], (int, np.integer))


def arc_contains(hole: HoleSpec, table, sid, r):
    """Vectorized open-arc membership for arrival coordinates."""
    a, b = hole.arc
    sid = np.asarray(sid)
    r = np.asarray(r)
    on = sid == hole.scatterer_id
    if a < b:
        return on & (r > a) & (r < b)
    return on & ((r > a) | (r < b))


def hole_image_offsets(table, hole: HoleSpec, reach: float | None = None):
    """Integer translates of a Type II hole reachable by one flight."""
    if reach is None:
        if table.certificate is None:
            raise InvalidArgumentError("table has no horizon certificate; pass reach")
        reach = table.certificate.l_max
    d0 = math.sqrt(0.5) + float(table.radii.max())
    kmax = int(math.ceil(reach + hole.radius + d0 + 1.0))
    cx, cy = hole.center
    offs = []
    for kx in range(-kmax, kmax + 1):
        for ky in range(-kmax, kmax + 1):
            lb = math.hypot(cx + kx - 0.5, cy + ky - 0.5) - hole.radius - d0
            if lb <= reach:
                offs.append((float(kx), float(ky)))
    return np.array(offs)


def segment_crosses_disk(start, direction, length, center, radius, offsets):
    """Whether unfolded segments pass strictly inside a disk image.

    start (N,2), direction (N,2) unit, length (N,); offsets (K,2) lists
    the integer translates worth checking.  Strict inequality: grazing
    the closed disk boundary does not count as a crossing.
    """
    start = np.atleast_2d(start)
    direction = np.atleast_2d(direction)
    length = np.atleast_1d(length)
    out = np.zeros(len(length), dtype=bool)
    r2 = radius * radius
    for ox, oy in offsets:
        wx = (center[0] + ox) - start[:, 0]
        wy = (center[1] + oy) - start[:, 1]
        tp = np.clip(wx * direction[:, 0] + wy * direction[:, 1], 0.0, length)
        dx = wx - tp * direction[:, 0]
        dy = wy - tp * direction[:, 1]
        out |= dx * dx + dy * dy < r2
    return out


def arrival_escape_mask(table, hole: HoleSpec, batch: _bmap.CollisionBatch,
                        offsets=None):
    """Escape mask for one collision batch under the arrival convention.

    Censored entries are never marked escaped; the caller accounts for
    them separately.
    """
    if hole.kind == "I":
        mask = arc_contains(hole, table, batch.scatterer_id, batch.r)
    else:
        if offsets is None:
            offsets = hole_image_offsets(table, hole)
        mask = segment_crosses_disk(
            batch.start, batch.direction, batch.flight_length,
            hole.center, hole.radius, offsets,
        )
    return mask & ~batch.censored


def state_in_hole_batch(table, hole: HoleSpec, sid, r, phi, offsets=None):
    """Vectorized phase-space membership; returns (in_hole, censored).

    Type II membership looks one flight backward: the state is in the
    hole exactly when the flight that produced it crossed the disk.
    """
    sid = np.asarray(sid, dtype=np.int64)
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if hole.kind == "I":
        return arc_contains(hole, table, sid, r), np.zeros(sid.shape, dtype=bool)
    back = _bmap.collide_inverse_batch(table, sid, r, phi)
    if offsets is None:
        offsets = hole_image_offsets(table, hole)
    mask = segment_crosses_disk(
        back.start, back.direction, back.flight_length,
        hole.center, hole.radius, offsets,
    )
    return mask & ~back.censored, back.censored


def in_hole(table, hole: HoleSpec, x: _bmap.PhasePoint) -> bool:
    """Phase-space hole membership of a single state; raises on censoring."""
    _bmap.check_phase_point(table, x)
    mask, cens = state_in_hole_batch(
        table, hole, [x.scatterer_id], [x.r], [x.phi]
    )
    if cens[0]:
        from .errors import NearTangencyError

        raise NearTangencyError("membership undecidable: backward flight censored")
    return bool(mask[0])


def in_B_sigma(table, hole: HoleSpec, x: _bmap.PhasePoint) -> bool:
    """Whether the next flight from x enters the hole (pre-escape set)."""
    _bmap.check_phase_point(table, x)
    y, seg = _bmap.collide(table, x)  # raises NearTangencyError if censored
    if hole.kind == "I":
        return bool(arc_contains(hole, table, [y.scatterer_id], [y.r])[0])
    offsets = hole_image_offsets(table, hole)
    return bool(
        segment_crosses_disk(
            np.array([seg.start]), np.array([seg.direction]),
            np.array([seg.length]), hole.center, hole.radius, offsets,
        )[0]
    )


def hole_to_json(hole: HoleSpec) -> dict:
    if hole.kind == "I":
        return {
            "type": "I",
            "scatterer": int(hole.scatterer_id),
            "arc": [float(hole.arc[0]), float(hole.arc[1])],
        }
    return {"type": "II", "center": [float(hole.center[0]), float(hole.center[1])],
            "radius": float(hole.radius)}


def hole_from_json(table, obj) -> HoleSpec:
    try:
        kind = obj["type"]
        if kind == "I":
            return type_i_hole(table, int(obj["scatterer"]),
                               float(obj["arc"][0]), float(obj["arc"][1]))
        if kind == "II":
            return type_ii_hole(
                table, (float(obj["center"][0]), float(obj["center"][1])),
                float(obj["radius"]),
            )
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise ConfigError(f"malformed hole spec: {exc}") from exc
    raise ConfigError(f"unknown hole type {obj.get('type')!r}")
