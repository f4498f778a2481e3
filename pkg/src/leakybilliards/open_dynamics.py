"""Open-system evolution: iterate the collision map and remove escapers.

Two bookkeeping conventions for when an escape through a Type II disk
(or a Type I arc) is counted:

* "arrival": a trajectory is killed at the collision state it lands on;
  index 0 escapes are states already in the hole.
* "departure": the kill is attributed to the state the fatal flight
  left from, one index earlier.  The surviving trajectories are the
  same; only the escape-time index shifts by one.

Near-tangential collisions are censored rather than resolved: a
censored particle leaves the at-risk population at the step where the
guard fired and is excluded from both numerator and denominator of
every survival ratio downstream.

Threading never changes results: particle arrays are processed in
fixed-size chunks written to disjoint slices, so outputs are identical
byte-for-byte for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import billiard_map as _bmap
from . import holes as _holes
from .errors import InvalidArgumentError

CHUNK = 65536

ALIVE, ESCAPED, CENSORED = 0, 1, 2


def default_threads() -> int:
    """Worker count from LEAKY_THREADS, defaulting to 1."""
    try:
        return max(1, int(os.environ.get("LEAKY_THREADS", "1")))
    except ValueError:
        return 1


def collide_batch_threaded(table, sid, r, phi, threads: int = 1):
    """collide_batch over fixed chunks; bitwise equal for any thread count."""
    n = len(sid)
    if threads <= 1 or n <= CHUNK:
        return _bmap.collide_batch(table, sid, r, phi)
    out_sid = np.empty(n, dtype=np.int64)
    out_r = np.empty(n)
    out_phi = np.empty(n)
    out_len = np.empty(n)
    out_start = np.empty((n, 2))
    out_dir = np.empty((n, 2))
    out_cens = np.empty(n, dtype=bool)

    def work(lo):
        hi = min(lo + CHUNK, n)
        b = _bmap.collide_batch(table, sid[lo:hi], r[lo:hi], phi[lo:hi])
        out_sid[lo:hi] = b.scatterer_id
        out_r[lo:hi] = b.r
        out_phi[lo:hi] = b.phi
        out_len[lo:hi] = b.flight_length
        out_start[lo:hi] = b.start
        out_dir[lo:hi] = b.direction
        out_cens[lo:hi] = b.censored

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(work, range(0, n, CHUNK)))
    return _bmap.CollisionBatch(out_sid, out_r, out_phi, out_len,
                                out_start, out_dir, out_cens)


@dataclass
class EnsembleResult:
    """Outcome of an open evolution run.

    survivors, escaped, censored are cumulative counts indexed by step,
    length n_steps+1, satisfying survivors[k] + escaped[k] + censored[k]
    == n at every k.  final_* hold the surviving states at the last
    step; alive_index maps them back to initial-particle indices.
    escape_step[i] is the kill index of particle i (-1 if it never
    escaped); captures maps requested steps to survivor state triples.
    """

    convention: str
    n: int
    n_steps: int
    survivors: np.ndarray
    escaped: np.ndarray
    censored: np.ndarray
    final_sid: np.ndarray
    final_r: np.ndarray
    final_phi: np.ndarray
    alive_index: np.ndarray
    escape_step: np.ndarray
    captures: dict = field(default_factory=dict)


def evolve_ensemble(table, hole, sid, r, phi, n_steps: int,
                    convention: str = "arrival", threads: int = 1,
                    capture=()) -> EnsembleResult:
    """Iterate the open map on an ensemble, recording survival counts.

    hole may be None for a closed run (nothing escapes, censoring still
    applies).  capture lists steps at which survivor states should be
    snapshotted; step n_steps is always available via final_*.
    """
    if convention not in ("arrival", "departure"):
        raise InvalidArgumentError(f"unknown escape convention {convention!r}")
    if n_steps < 0:
        raise InvalidArgumentError("n_steps must be nonnegative")
    sid = np.asarray(sid, dtype=np.int64).copy()
    r = np.asarray(r, dtype=float).copy()
    phi = np.asarray(phi, dtype=float).copy()
    n = len(sid)
    status = np.zeros(n, dtype=np.int8)
    escape_step = np.full(n, -1, dtype=np.int64)
    capture = set(int(c) for c in capture)
    captures: dict = {}

    offsets = None
    if hole is not None and hole.kind == "II":
        offsets = _holes.hole_image_offsets(table, hole)

    survivors = np.zeros(n_steps + 1, dtype=np.int64)
    escaped = np.zeros(n_steps + 1, dtype=np.int64)
    censored = np.zeros(n_steps + 1, dtype=np.int64)

    if convention == "arrival" and hole is not None:
        # index-0 escapes: initial states already inside the hole
        mask, cens = _holes.state_in_hole_batch(table, hole, sid, r, phi, offsets)
        status[cens] = CENSORED
        hit = mask & (status == ALIVE)
        status[hit] = ESCAPED
        escape_step[hit] = 0

    def record(k):
        survivors[k] = int(np.count_nonzero(status == ALIVE))
        escaped[k] = int(np.count_nonzero(status == ESCAPED))
        censored[k] = int(np.count_nonzero(status == CENSORED))
        if k in capture:
            live = status == ALIVE
            captures[k] = (sid[live].copy(), r[live].copy(), phi[live].copy())

    record(0)
    if convention == "arrival":
        # iteration k computes the collision arriving at index k
        for k in range(1, n_steps + 1):
            live = np.flatnonzero(status == ALIVE)
            if len(live) == 0:
                record(k)
                continue
            batch = collide_batch_threaded(
                table, sid[live], r[live], phi[live], threads
            )
            status[live[batch.censored]] = CENSORED
            esc = (
                _holes.arrival_escape_mask(table, hole, batch, offsets)
                if hole is not None
                else np.zeros(len(live), dtype=bool)
            )
            status[live[esc]] = ESCAPED
            escape_step[live[esc]] = k
            ok = ~(batch.censored | esc)
            tgt = live[ok]
            sid[tgt] = batch.scatterer_id[ok]
            r[tgt] = batch.r[ok]
            phi[tgt] = batch.phi[ok]
            record(k)
    else:
        # iteration k tests the flight departing at index k, so filling
        # survivors[0..n_steps] takes n_steps+1 collision passes
        for k in range(0, n_steps + 1):
            live = np.flatnonzero(status == ALIVE)
            if len(live) == 0:
                record(k)
                continue
            batch = collide_batch_threaded(
                table, sid[live], r[live], phi[live], threads
            )
            status[live[batch.censored]] = CENSORED
            esc = (
                _holes.arrival_escape_mask(table, hole, batch, offsets)
                if hole is not None
                else np.zeros(len(live), dtype=bool)
            )
            status[live[esc]] = ESCAPED
            escape_step[live[esc]] = k
            ok = ~(batch.censored | esc)
            tgt = live[ok]
            sid[tgt] = batch.scatterer_id[ok]
            r[tgt] = batch.r[ok]
            phi[tgt] = batch.phi[ok]
            record(k)

    live = status == ALIVE
    return EnsembleResult(
        convention=convention,
        n=n,
        n_steps=n_steps,
        survivors=survivors,
        escaped=escaped,
        censored=censored,
        final_sid=sid[live],
        final_r=r[live],
        final_phi=phi[live],
        alive_index=np.flatnonzero(live),
        escape_step=escape_step,
        captures=captures,
    )


@dataclass(frozen=True)
class SurvivalRecord:
    status: str  # "escaped", "alive", or "censored"
    steps: int   # escape index, or last index reached


def open_step(table, hole, x, convention: str = "arrival"):
    """One open-map step on a single state.

    Returns (outcome, next_state): outcome is "alive", "escaped", or
    "censored"; next_state is None unless alive.  Under the arrival
    convention an input already in the hole escapes immediately.
    """
    if convention not in ("arrival", "departure"):
        raise InvalidArgumentError(f"unknown escape convention {convention!r}")
    if convention == "arrival" and hole is not None and _holes.in_hole(table, hole, x):
        return "escaped", None
    batch = _bmap.collide_batch(table, [x.scatterer_id], [x.r], [x.phi])
    if batch.censored[0]:
        return "censored", None
    if hole is not None and bool(
        _holes.arrival_escape_mask(table, hole, batch)[0]
    ):
        return "escaped", None
    return "alive", _bmap.PhasePoint(
        int(batch.scatterer_id[0]), float(batch.r[0]), float(batch.phi[0])
    )


def survival_time(table, hole, x, n_max: int,
                  convention: str = "arrival") -> SurvivalRecord:
    """First escape index of one trajectory, scanned up to n_max."""
    res = evolve_ensemble(
        table, hole, [x.scatterer_id], [x.r], [x.phi], n_max,
        convention=convention,
    )
    if res.escape_step[0] >= 0:
        return SurvivalRecord("escaped", int(res.escape_step[0]))
    if res.censored[-1] > 0:
        return SurvivalRecord(
            "censored", int(np.flatnonzero(res.censored > 0)[0])
        )
    return SurvivalRecord("alive", n_max)
