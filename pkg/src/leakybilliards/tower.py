"""Finite expanding Markov towers with Markov holes.

A tower has finitely many base cells (columns) with masses m_j and
return times R_j; the point climbs the column one level per step and
on the top step returns to the base, spreading over a designated set
of target base cells with a constant Jacobian fixed by mass balance
J_j = mass(targets_j) / m_j.  Full-branch towers (targets = all base
cells) are the default; restricting targets realizes general Markov
return structures such as interval maps on a non-generating partition.

Holes are unions of cells (level, column).  Functions live in the
subspace vanishing on hole cells; the transfer operator kills outflow
from holes, so its iterates integrate exactly to the surviving mass.

Functions are piecewise constant on return-itinerary cylinders of a
fixed depth k.  That subspace is invariant under the transfer operator
(the operator consumes one itinerary symbol and the landing cell
supplies a new first symbol), so iteration at fixed depth is exact
linear algebra, never an approximation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadTailError,
    ConfigError,
    DepthExhaustedError,
    HoleTooBigError,
    InvalidArgumentError,
    NoConvergenceError,
    NotMarkovError,
    NotMixingError,
    NotStabilizedError,
    ReducibleSurvivingGraphError,
)

_TAIL_TOL = 1e-12
_BALANCE_RTOL = 1e-9


@dataclass(frozen=True)
class TowerColumn:
    """One base cell: mass, return time, and return branch structure.

    target lists the base cells the return branch covers (None means
    all of them, the full-branch case); jacobian, when given, must
    equal mass(target)/mass and exists only as a redundant check.
    """

    mass: float
    return_time: int
    target: tuple[int, ...] | None = None
    jacobian: float | None = None


@dataclass(frozen=True)
class TowerSpec:
    """Raw tower description prior to validation."""

    columns: tuple[TowerColumn, ...]
    beta: float
    c0: float
    theta0: float
    holes: frozenset[tuple[int, int]] = frozenset()
    c1: float = 0.0
    l_trunc: int | None = None


class Tower:
    """Validated tower with precomputed cylinder tables.

    Construct through build_tower, which checks the tail bound, the
    Jacobian mass balance, the hole-size condition, and mixing of the
    surviving cell graph.
    """

    def __init__(self, spec: TowerSpec, enforce_hole_condition: bool = True):
        cols = spec.columns
        if len(cols) == 0:
            raise ConfigError("tower needs at least one column")
        self.spec = spec
        self.n_cols = len(cols)
        self.masses = np.array([c.mass for c in cols], dtype=float)
        self.returns = np.array([c.return_time for c in cols], dtype=np.int64)
        if np.any(self.masses <= 0):
            raise ConfigError("column masses must be positive")
        if np.any(self.returns < 1):
            raise ConfigError("return times must be >= 1")
        self.targets: tuple[tuple[int, ...], ...] = tuple(
            tuple(range(self.n_cols)) if c.target is None
            else tuple(sorted(set(int(j) for j in c.target)))
            for c in cols
        )
        for j, tgt in enumerate(self.targets):
            if len(tgt) == 0:
                raise ConfigError(f"column {j} has an empty return target")
            if tgt[0] < 0 or tgt[-1] >= self.n_cols:
                raise ConfigError(f"column {j} targets unknown cells {tgt}")
        self.base_mass = float(self.masses.sum())
        self.target_mass = np.array(
            [self.masses[list(t)].sum() for t in self.targets]
        )
        self.jacobians = self.target_mass / self.masses
        for j, c in enumerate(cols):
            if c.jacobian is not None and not math.isclose(
                c.jacobian, self.jacobians[j], rel_tol=_BALANCE_RTOL
            ):
                raise ConfigError(
                    f"column {j}: declared jacobian {c.jacobian} breaks mass "
                    f"balance (expected {self.jacobians[j]})"
                )
        self.max_return = int(self.returns.max())
        if spec.l_trunc is not None and spec.l_trunc < self.max_return:
            raise ConfigError(
                f"l_trunc={spec.l_trunc} below the tallest column "
                f"{self.max_return}"
            )
        self.cells: list[tuple[int, int]] = [
            (l, j) for j in range(self.n_cols) for l in range(int(self.returns[j]))
        ]
        cellset = set(self.cells)
        for cell in spec.holes:
            if tuple(cell) not in cellset:
                raise ConfigError(f"hole cell {cell} does not exist")
        self.holes = frozenset((int(l), int(j)) for l, j in spec.holes)
        self.beta = float(spec.beta)
        self.c0 = float(spec.c0)
        self.theta0 = float(spec.theta0)
        self.c1 = float(spec.c1)
        if not 0.0 < self.theta0 < 1.0:
            raise ConfigError("theta0 must lie in (0,1)")
        if not self.theta0 < self.beta < 1.0:
            raise ConfigError(
                f"beta={self.beta} must lie in (theta0={self.theta0}, 1)"
            )
        self._check_tail()
        self.hole_level_mass = self._hole_level_masses()
        self.hole_condition_lhs = float(sum(
            self.beta ** (-(l - 1)) * m
            for l, m in self.hole_level_mass.items() if l >= 1
        ))
        self.hole_condition_rhs = (1.0 - self.beta) * self.base_mass / (1.0 + self.c1)
        if enforce_hole_condition and not (
            self.hole_condition_lhs < self.hole_condition_rhs
        ):
            raise HoleTooBigError(
                f"weighted hole mass {self.hole_condition_lhs:.6g} >= "
                f"{self.hole_condition_rhs:.6g}"
            )
        self._check_mixing()
        self._depth_cache: dict[int, dict] = {}

    # -- validation pieces -------------------------------------------------

    def _check_tail(self):
        for n in range(0, self.max_return + 1):
            above = float(self.masses[self.returns > n].sum())
            if above > self.c0 * self.theta0 ** n + _TAIL_TOL:
                raise BadTailError(
                    f"mass above level {n} is {above:.6g} > "
                    f"C0*theta0^{n} = {self.c0 * self.theta0 ** n:.6g}"
                )

    def _hole_level_masses(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for l, j in self.holes:
            out[l] = out.get(l, 0.0) + float(self.masses[j])
        return out

    def level_mass(self, l: int) -> float:
        return float(self.masses[self.returns > l].sum())

    def surviving_cells(self) -> list[tuple[int, int]]:
        return [c for c in self.cells if c not in self.holes]

    def _surviving_edges(self):
        """Adjacency of the one-step dynamics restricted to non-hole cells."""
        edges: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for l, j in self.surviving_cells():
            if l + 1 < self.returns[j]:
                nxt = [(l + 1, j)]
            else:
                nxt = [(0, i) for i in self.targets[j]]
            edges[(l, j)] = [c for c in nxt if c not in self.holes]
        return edges

    def _check_mixing(self):
        edges = self._surviving_edges()
        sccs = _strongly_connected_components(edges)
        nontrivial = []
        for comp in sccs:
            compset = set(comp)
            has_cycle = len(comp) > 1 or any(
                v in edges.get(v, ()) for v in comp
            )
            if has_cycle:
                nontrivial.append(compset)
        if len(nontrivial) == 0:
            raise NotMixingError("surviving dynamics has no recurrent cycle")
        if len(nontrivial) > 1:
            raise NotMixingError(
                f"surviving dynamics splits into {len(nontrivial)} recurrent "
                "classes"
            )
        core = nontrivial[0]
        if not any(l == 0 for l, _ in core):
            raise NotMixingError("recurrent class never touches the base")
        period = _component_period(edges, core)
        if period != 1:
            raise NotMixingError(f"surviving dynamics has period {period}")
        self.core_cells = frozenset(core)

    def cell_survives_to_base(self, l: int, j: int) -> bool:
        """Whether part of the cell returns to a non-hole base cell.

        True when the climb from level l to the top of column j avoids
        hole cells and some target base cell is not a hole.
        """
        if (l, j) in self.holes:
            return False
        for lv in range(l, int(self.returns[j])):
            if (lv, j) in self.holes:
                return False
        return any((0, i) not in self.holes for i in self.targets[j])

    # -- cylinder tables ----------------------------------------------------

    def depth_tables(self, depth: int) -> dict:
        """Per-column path counts, offsets, masses, truncation gathers."""
        if depth < 0:
            raise InvalidArgumentError("depth must be nonnegative")
        if depth in self._depth_cache:
            return self._depth_cache[depth]
        ncols = self.n_cols
        counts = np.empty((depth + 1, ncols), dtype=np.int64)
        counts[0] = 1
        for d in range(1, depth + 1):
            for c in range(ncols):
                counts[d, c] = sum(counts[d - 1, i] for i in self.targets[c])
        # child block offsets of P_d(c), aligned with targets[c]
        offsets: list[list[np.ndarray]] = [[np.zeros(0, np.int64)] * ncols]
        for d in range(1, depth + 1):
            row = []
            for c in range(ncols):
                sizes = [counts[d - 1, i] for i in self.targets[c]]
                row.append(np.concatenate(([0], np.cumsum(sizes)[:-1]))
                           .astype(np.int64))
            offsets.append(row)
        mass_frac: list[list[np.ndarray]] = [
            [np.ones(1) for _ in range(ncols)]
        ]
        for d in range(1, depth + 1):
            row = []
            for c in range(ncols):
                parts = [
                    (self.masses[i] / self.target_mass[c]) * mass_frac[d - 1][i]
                    for i in self.targets[c]
                ]
                row.append(np.concatenate(parts))
            mass_frac.append(row)
        # trunc[d][c]: index of the depth-(d-1) prefix of each depth-d path
        trunc: list[list[np.ndarray] | None] = [None]
        if depth >= 1:
            trunc.append([
                np.zeros(counts[1, c], dtype=np.int64) for c in range(ncols)
            ])
        for d in range(2, depth + 1):
            row = []
            for c in range(ncols):
                parts = [
                    offsets[d - 1][c][ti] + trunc[d - 1][i]
                    for ti, i in enumerate(self.targets[c])
                ]
                row.append(np.concatenate(parts))
            trunc.append(row)
        tables = {
            "counts": counts,
            "offsets": offsets,
            "mass_frac": mass_frac,
            "trunc": trunc,
        }
        self._depth_cache[depth] = tables
        return tables


def build_tower(spec: TowerSpec, enforce_hole_condition: bool = True) -> Tower:
    """Validate a tower spec; see Tower for the checks performed."""
    return Tower(spec, enforce_hole_condition=enforce_hole_condition)


def _strongly_connected_components(edges):
    """Iterative Tarjan; edges is dict node -> list of nodes."""
    index: dict = {}
    low: dict = {}
    onstack: set = set()
    stack: list = []
    out: list[list] = []
    counter = [0]
    for root in edges:
        if root in index:
            continue
        work = [(root, iter(edges.get(root, ())))]
        index[root] = low[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        onstack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if nxt not in index:
                    index[nxt] = low[nxt] = counter[0]
                    counter[0] += 1
                    stack.append(nxt)
                    onstack.add(nxt)
                    work.append((nxt, iter(edges.get(nxt, ()))))
                    advanced = True
                    break
                if nxt in onstack:
                    low[node] = min(low[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    v = stack.pop()
                    onstack.discard(v)
                    comp.append(v)
                    if v == node:
                        break
                out.append(comp)
    return out


def _component_period(edges, comp: set) -> int:
    """gcd of cycle lengths within one strongly connected component."""
    start = next(iter(comp))
    dist = {start: 0}
    queue = [start]
    g = 0
    while queue:
        u = queue.pop(0)
        for v in edges.get(u, ()):
            if v not in comp:
                continue
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
            else:
                g = math.gcd(g, dist[u] + 1 - dist[v])
    return abs(g) if g else 0


# -- functions on the tower --------------------------------------------------


@dataclass
class TowerFunction:
    """Piecewise-constant function on depth-k itinerary cylinders.

    values maps each cell (level, column) to the array of cylinder
    values in tree-lexicographic order; hole cells are pinned to zero
    (the function space is the subspace vanishing on the hole).
    """

    tower: Tower
    depth: int
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        tables = self.tower.depth_tables(self.depth)
        counts = tables["counts"][self.depth]
        for cell in self.tower.cells:
            l, j = cell
            want = counts[j]
            if cell not in self.values:
                self.values[cell] = np.zeros(want)
            else:
                arr = np.asarray(self.values[cell], dtype=float)
                if arr.shape != (want,):
                    raise InvalidArgumentError(
                        f"cell {cell}: expected {want} cylinder values, "
                        f"got {arr.shape}"
                    )
                self.values[cell] = arr.copy()
        for cell in self.tower.holes:
            self.values[cell] = np.zeros(counts[cell[1]])
        self.values = {cell: self.values[cell] for cell in self.tower.cells}

    # arithmetic (cellwise, same tower and depth)

    def _binary(self, other, op):
        if isinstance(other, TowerFunction):
            if other.tower is not self.tower or other.depth != self.depth:
                a, b = _common_depth(self, other)
                return a._binary(b, op)
            vals = {c: op(self.values[c], other.values[c])
                    for c in self.tower.cells}
        else:
            vals = {c: op(self.values[c], other) for c in self.tower.cells}
        return TowerFunction(self.tower, self.depth, vals)

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, scalar):
        return self._binary(float(scalar), np.multiply)

    __rmul__ = __mul__

    def copy(self) -> "TowerFunction":
        return TowerFunction(
            self.tower, self.depth,
            {c: v.copy() for c, v in self.values.items()},
        )

    def integrate(self) -> float:
        """Integral against the tower measure (cell mass times fraction)."""
        tables = self.tower.depth_tables(self.depth)
        frac = tables["mass_frac"][self.depth]
        total = 0.0
        for (l, j), v in self.values.items():
            total += self.tower.masses[j] * float(v @ frac[j])
        return total

    def refined(self, depth: int) -> "TowerFunction":
        """Same function represented on deeper cylinders (always exact)."""
        if depth < self.depth:
            raise InvalidArgumentError("refined() cannot lower the depth")
        out = self
        while out.depth < depth:
            d = out.depth + 1
            tables = self.tower.depth_tables(d)
            trunc = tables["trunc"][d]
            vals = {
                (l, j): out.values[(l, j)][trunc[j]]
                for (l, j) in self.tower.cells
            }
            out = TowerFunction(self.tower, d, vals)
        return out

    def coarsened(self, depth: int, rtol: float = 1e-12) -> "TowerFunction":
        """Drop itinerary symbols; fails if information would be lost."""
        if depth > self.depth:
            raise InvalidArgumentError("coarsened() cannot raise the depth")
        out = self
        while out.depth > depth:
            d = out.depth
            tables = self.tower.depth_tables(d)
            trunc = tables["trunc"][d]
            counts = tables["counts"][d - 1]
            vals = {}
            for (l, j), v in out.values.items():
                agg_min = np.full(counts[j], np.inf)
                agg_max = np.full(counts[j], -np.inf)
                np.minimum.at(agg_min, trunc[j], v)
                np.maximum.at(agg_max, trunc[j], v)
                scale = np.maximum(np.abs(agg_min), np.abs(agg_max))
                if np.any(agg_max - agg_min > rtol * np.maximum(scale, 1.0)):
                    raise DepthExhaustedError(
                        f"cell {(l, j)} is not constant on depth-{d - 1} "
                        "cylinders; representation depth exhausted"
                    )
                vals[(l, j)] = agg_max
            out = TowerFunction(self.tower, d - 1, vals)
        return out

    def sup_norm(self) -> float:
        """Level-weighted sup norm: max over levels of beta^l * sup |rho|."""
        beta = self.tower.beta
        best = 0.0
        for (l, j), v in self.values.items():
            if len(v):
                best = max(best, beta ** l * float(np.abs(v).max()))
        return best

    def lip_norm(self) -> float:
        """Level-weighted Lipschitz seminorm in the symbolic metric.

        Within one cell, two cylinders first separate at the return
        where their itineraries differ; the separation time accumulates
        the climb to the first return plus the full return times along
        the shared prefix.
        """
        beta = self.tower.beta
        tower = self.tower
        tables = tower.depth_tables(self.depth)
        counts = tables["counts"]
        best = 0.0

        def scan(col, d, base_time, v):
            # returns (vmin, vmax, lip) of the subtree; v is the value slice
            if d == 0 or len(v) == 1:
                return float(v.min()), float(v.max()), 0.0
            mins, maxs, lips = [], [], []
            off = 0
            for i in tower.targets[col]:
                nsub = counts[d - 1, i]
                sub = v[off:off + nsub]
                off += nsub
                mn, mx, lp = scan(i, d - 1, base_time + tower.returns[i], sub)
                mins.append(mn)
                maxs.append(mx)
                lips.append(lp)
            lip = max(lips)
            if len(mins) > 1:
                order = np.argsort(mins)
                m0, m1 = order[0], order[1]
                cross = 0.0
                for ci in range(len(mins)):
                    other_min = mins[m1] if ci == m0 else mins[m0]
                    cross = max(cross, maxs[ci] - other_min)
                lip = max(lip, cross / beta ** base_time)
            return min(mins), max(maxs), lip

        for (l, j), v in self.values.items():
            if len(v) <= 1:
                continue
            first_return = int(tower.returns[j]) - l
            _, _, lip = scan(j, self.depth, first_return, v)
            best = max(best, beta ** l * lip)
        return best

    def norm(self) -> float:
        return self.sup_norm() + self.lip_norm()


def _common_depth(a: TowerFunction, b: TowerFunction):
    if a.tower is not b.tower:
        raise InvalidArgumentError("functions live on different towers")
    d = max(a.depth, b.depth)
    return a.refined(d), b.refined(d)


def tower_constant(tower: Tower, value: float = 1.0,
                   depth: int = 0) -> TowerFunction:
    """Constant function (zero on the hole), at the requested depth."""
    tables = tower.depth_tables(depth)
    counts = tables["counts"][depth]
    vals = {
        (l, j): np.full(counts[j], float(value)) for (l, j) in tower.cells
    }
    return TowerFunction(tower, depth, vals)


def tower_cell_indicator(tower: Tower, cell: tuple[int, int],
                         depth: int = 0) -> TowerFunction:
    """Indicator of one cell."""
    if tuple(cell) not in set(tower.cells):
        raise InvalidArgumentError(f"no cell {cell}")
    f = tower_constant(tower, 0.0, depth)
    f.values[tuple(cell)][:] = 1.0
    if tuple(cell) in tower.holes:
        f.values[tuple(cell)][:] = 0.0
    return f


def tower_random(tower: Tower, depth: int, rng,
                 low: float = 0.5, high: float = 1.5) -> TowerFunction:
    """Random positive piecewise-constant function at the given depth."""
    tables = tower.depth_tables(depth)
    counts = tables["counts"][depth]
    vals = {
        (l, j): low + (high - low) * rng.random(int(counts[j]))
        for (l, j) in tower.cells
    }
    return TowerFunction(tower, depth, vals)


# -- transfer operator --------------------------------------------------------


def transfer_apply(tower: Tower, rho: TowerFunction) -> TowerFunction:
    """One application of the open transfer operator.

    Pulls each cell back one step, dividing by the return Jacobian on
    the base and killing contributions that start on hole cells; the
    output vanishes on the hole, so iterating stays in the subspace.
    The integral of the output equals the integral of the input over
    the set surviving one step, exactly.
    """
    if rho.tower is not tower:
        raise InvalidArgumentError("function lives on a different tower")
    depth = rho.depth
    tables = tower.depth_tables(depth)
    counts = tables["counts"]
    offsets = tables["offsets"]
    trunc = tables["trunc"]
    out = {cell: None for cell in tower.cells}
    # climbing moves: exact copies with unit Jacobian
    for (l, j) in tower.cells:
        if l == 0:
            continue
        src = (l - 1, j)
        out[(l, j)] = (
            np.zeros(counts[depth, j]) if src in tower.holes
            else rho.values[src].copy()
        )
    # returns: base cell i collects tops of columns whose target covers i
    for i in range(tower.n_cols):
        acc = np.zeros(counts[depth, i])
        for j in range(tower.n_cols):
            if i not in tower.targets[j]:
                continue
            top = (int(tower.returns[j]) - 1, j)
            if top in tower.holes:
                continue
            ti = tower.targets[j].index(i)
            if depth == 0:
                contrib = rho.values[top][0] * np.ones(1)
            else:
                gather = offsets[depth][j][ti] + (
                    trunc[depth][i] if depth >= 1 else 0
                )
                contrib = rho.values[top][gather]
            acc = acc + contrib / tower.jacobians[j]
        out[(0, i)] = acc
    for cell in tower.holes:
        out[cell] = np.zeros(counts[depth, cell[1]])
    return TowerFunction(tower, depth, out)


# -- spectral data -------------------------------------------------------------


@dataclass
class EigenReport:
    theta: float
    iterations: int
    trace: np.ndarray
    function_residual: float


def leading_eigenpair(tower: Tower, tol: float = 1e-13,
                      max_iter: int = 100000, depth: int = 0):
    """Dominant eigenvalue and eigenfunction of the open transfer operator.

    Power iteration with mass normalization; the eigenvalue estimate is
    the per-step mass ratio.  Converged h is normalized to integral 1.
    Returns (theta, h, EigenReport).  The dominant eigenvalue of a
    mixing tower with an admissible hole exceeds beta; a smaller result
    means the iteration left the quasi-compact regime and is rejected.
    """
    if tol <= 0:
        raise InvalidArgumentError("tol must be positive")
    rho = tower_constant(tower, 1.0, depth)
    mass = rho.integrate()
    trace = []
    theta = None
    stable = 0
    for it in range(1, max_iter + 1):
        nxt = transfer_apply(tower, rho)
        nmass = nxt.integrate()
        if nmass <= 0:
            raise NoConvergenceError(
                "transfer iteration lost all mass; hole swallows the core"
            )
        ratio = nmass / mass
        trace.append(ratio)
        rho = nxt * (1.0 / nmass)
        mass = 1.0
        if theta is not None and abs(ratio - theta) < tol * max(ratio, 1e-300):
            stable += 1
            if stable >= 3:
                theta = ratio
                break
        else:
            stable = 0
        theta = ratio
    else:
        raise NoConvergenceError(
            f"eigenvalue ratio did not stabilize in {max_iter} iterations"
        )
    h = rho * (1.0 / rho.integrate())
    resid = transfer_apply(tower, h) - h * theta
    report = EigenReport(
        theta=float(theta),
        iterations=it,
        trace=np.array(trace),
        function_residual=float(resid.sup_norm()),
    )
    if theta <= tower.beta:
        raise NoConvergenceError(
            f"dominant ratio {theta:.6g} <= beta {tower.beta}; outside the "
            "quasi-compact regime the power iteration is meaningless"
        )
    return float(theta), h, report


@dataclass(frozen=True)
class LowerBoundReport:
    bound: float
    vacuous: bool
    theta_star: float | None
    satisfied: bool | None

    def to_json(self) -> dict:
        return {
            "bound": self.bound,
            "vacuous": self.vacuous,
            "theta_star": self.theta_star,
            "satisfied": self.satisfied,
        }


def theta_lower_bound(tower: Tower, theta_star: float | None = None,
                      compute_theta: bool = True) -> LowerBoundReport:
    """Closed-form eigenvalue lower bound from the weighted hole mass.

    bound = 1 - (1+C1)/mass(base) * sum_{l>=1} beta^{-(l-1)} * holemass(l).
    Holes confined to level 0 leave the sum empty, so the bound is the
    vacuous value 1 and is flagged as such rather than compared.  The
    bound can be attained (a hole that annihilates a whole column one
    level up does it), so satisfied compares with a rounding margin.
    """
    s = tower.hole_condition_lhs
    bound = 1.0 - (1.0 + tower.c1) / tower.base_mass * s
    vacuous = s == 0.0
    if theta_star is None and compute_theta and not vacuous:
        theta_star, _, _ = leading_eigenpair(tower)
    satisfied = None
    if theta_star is not None and not vacuous:
        satisfied = bool(theta_star >= bound - 1e-12 * max(1.0, abs(bound)))
    return LowerBoundReport(
        bound=float(bound),
        vacuous=vacuous,
        theta_star=None if theta_star is None else float(theta_star),
        satisfied=satisfied,
    )


@dataclass
class DFunctionalReport:
    value: float
    terms: np.ndarray
    max_deviation: float
    positive_expected: bool

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "n_terms": int(len(self.terms)),
            "max_deviation": self.max_deviation,
            "positive_expected": self.positive_expected,
        }


def d_functional(tower: Tower, rho: TowerFunction,
                 theta_star: float | None = None, n_terms: int = 60,
                 rtol: float = 1e-8) -> DFunctionalReport:
    """Survival functional d(rho): limit of theta^{-n} * surviving mass.

    The sequence theta_star^{-n} * integral of the n-step open transfer
    of rho stabilizes geometrically; the reported value is the final
    term and max_deviation measures the spread over the last quarter of
    the terms.  When rho is nonnegative and strictly positive on a cell
    whose climb returns to an unharmed base cell, the limit must be
    positive; violating that raises, as does failure to stabilize.
    The normalizing base is the leading eigenvalue itself.
    """
    if n_terms < 8:
        raise InvalidArgumentError("n_terms must be at least 8")
    if theta_star is None:
        theta_star, _, _ = leading_eigenpair(tower)
    nonneg = all(np.all(v >= 0) for v in rho.values.values())
    positive_expected = nonneg and any(
        tower.cell_survives_to_base(l, j) and np.all(rho.values[(l, j)] > 0)
        for (l, j) in tower.cells if (l, j) not in tower.holes
    )
    terms = np.empty(n_terms + 1)
    cur = rho.copy()
    terms[0] = cur.integrate()
    scale = 1.0
    for n in range(1, n_terms + 1):
        cur = transfer_apply(tower, cur)
        scale /= theta_star
        terms[n] = cur.integrate() * scale
        # renormalize the carried function to keep floats in range
        m = abs(terms[n])
        if m > 0 and (m > 1e100 or m < 1e-100):
            raise NotStabilizedError(
                "terms diverged; theta_star inconsistent with the tower"
            )
    tail = terms[-max(n_terms // 4, 2):]
    value = float(terms[-1])
    spread = float(np.max(np.abs(tail - value)))
    if abs(value) > 0 and spread > rtol * max(abs(value), 1e-300):
        raise NotStabilizedError(
            f"d(rho) not stabilized: spread {spread:.3g} over the last "
            f"quarter vs value {value:.6g}"
        )
    if abs(value) == 0.0 and spread > rtol:
        raise NotStabilizedError(
            f"d(rho) not stabilized near zero: spread {spread:.3g}"
        )
    if positive_expected and not value > 0:
        raise NotStabilizedError(
            f"d(rho) = {value:.6g} but positivity was forced by support on "
            "a surviving cell"
        )
    return DFunctionalReport(
        value=value,
        terms=terms,
        max_deviation=spread,
        positive_expected=positive_expected,
    )


# -- exact interval-map oracle -------------------------------------------------


@dataclass(frozen=True)
class MarkovIntervalMap:
    """Piecewise-linear orientation-preserving map on a Markov partition.

    breakpoints are the partition endpoints x_0 < ... < x_m; cell i maps
    affinely onto [image_lo[i], image_hi[i]], whose endpoints must again
    be breakpoints.
    """

    breakpoints: tuple[float, ...]
    image_lo: tuple[float, ...]
    image_hi: tuple[float, ...]

    @property
    def n_cells(self) -> int:
        return len(self.breakpoints) - 1


@dataclass
class MarkovOracleResult:
    theta: float
    h: np.ndarray          # per-cell density values, 0 on hole cells
    psi: np.ndarray        # left functional scaled so d(rho) = sum psi*rho*len
    matrix: np.ndarray     # substochastic transfer matrix on all cells
    surviving: np.ndarray  # surviving cell indices
    lengths: np.ndarray    # cell lengths
    degenerate: bool

    def d_of(self, rho_values) -> float:
        rho = np.asarray(rho_values, dtype=float)
        return float((self.psi * rho * self.lengths).sum())


def markov_matrix_oracle(markov_map: MarkovIntervalMap,
                         hole_cells=frozenset()) -> MarkovOracleResult:
    """Exact spectral data of the open transfer operator by dense eigen.

    The transfer matrix on piecewise-constant densities has entries
    1/slope_j for each surviving branch j that covers cell i.  Returns
    the dominant eigenvalue with its right eigenfunction (integral 1)
    and the left functional psi normalized so that d(h) = 1; an
    all-hole partition yields the zero matrix, flagged degenerate.
    """
    bp = np.asarray(markov_map.breakpoints, dtype=float)
    if len(bp) < 2 or np.any(np.diff(bp) <= 0):
        raise NotMarkovError("breakpoints must be strictly increasing")
    m = markov_map.n_cells
    lo = np.asarray(markov_map.image_lo, dtype=float)
    hi = np.asarray(markov_map.image_hi, dtype=float)
    if lo.shape != (m,) or hi.shape != (m,):
        raise NotMarkovError("one image interval per cell required")
    lengths = np.diff(bp)

    def cell_index(x, name):
        i = int(np.argmin(np.abs(bp - x)))
        if abs(bp[i] - x) > 1e-12:
            raise NotMarkovError(
                f"{name} endpoint {x} is not a partition breakpoint"
            )
        return i

    holes = frozenset(int(c) for c in hole_cells)
    for c in holes:
        if not 0 <= c < m:
            raise NotMarkovError(f"hole cell {c} does not exist")
    span_lo = np.array([cell_index(x, "image lo") for x in lo])
    span_hi = np.array([cell_index(x, "image hi") for x in hi])
    if np.any(span_hi <= span_lo):
        raise NotMarkovError("image intervals must be nondegenerate")
    slopes = (hi - lo) / lengths
    mat = np.zeros((m, m))
    for j in range(m):
        if j in holes:
            continue
        for i in range(span_lo[j], span_hi[j]):
            mat[i, j] = 1.0 / slopes[j]
    surviving = np.array(sorted(set(range(m)) - holes), dtype=np.int64)
    if len(surviving) == 0:
        return MarkovOracleResult(
            theta=0.0, h=np.zeros(m), psi=np.zeros(m), matrix=mat,
            surviving=surviving, lengths=lengths, degenerate=True,
        )
    sub = mat[np.ix_(surviving, surviving)]
    # the oracle demands an irreducible surviving transition structure
    adj = {
        int(a): [int(b) for b in surviving[np.flatnonzero(sub[:, k])]]
        for k, a in enumerate(surviving)
    }
    sccs = _strongly_connected_components(adj)
    if len(sccs) != 1:
        raise ReducibleSurvivingGraphError(
            f"surviving cells split into {len(sccs)} communicating classes"
        )
    w, vecs = np.linalg.eig(sub)
    k = int(np.argmax(np.abs(w)))
    theta = w[k]
    if abs(theta.imag) > 1e-12:
        raise ReducibleSurvivingGraphError(
            "dominant eigenvalue is not real; surviving dynamics not mixing"
        )
    theta = float(theta.real)
    order = np.argsort(-np.abs(w))
    if len(w) > 1 and abs(abs(w[order[0]]) - abs(w[order[1]])) < 1e-12:
        raise ReducibleSurvivingGraphError(
            "dominant eigenvalue is not simple in modulus"
        )
    v = vecs[:, k].real
    if v.sum() < 0:
        v = -v
    if np.any(v < -1e-10):
        raise ReducibleSurvivingGraphError("right eigenvector changes sign")
    wl, vecl = np.linalg.eig(sub.T)
    kl = int(np.argmin(np.abs(wl - theta)))
    u = vecl[:, kl].real
    if u.sum() < 0:
        u = -u
    sub_len = lengths[surviving]
    h_full = np.zeros(m)
    h_full[surviving] = v / float(v @ sub_len)
    psi_full = np.zeros(m)
    # scale so that sum(psi * h * len) = 1, giving d(h) = 1
    uh = float((u * h_full[surviving] * sub_len).sum())
    psi_full[surviving] = u / uh
    return MarkovOracleResult(
        theta=theta, h=h_full, psi=psi_full, matrix=mat,
        surviving=surviving, lengths=lengths, degenerate=False,
    )


def flat_tower_from_markov_map(markov_map: MarkovIntervalMap, hole_cells,
                               beta: float = 0.8,
                               theta0: float = 0.5) -> TowerSpec:
    """Flat tower (all returns 1) matching an interval-map oracle input."""
    bp = np.asarray(markov_map.breakpoints, dtype=float)
    lengths = np.diff(bp)
    m = markov_map.n_cells

    def cell_index(x):
        i = int(np.argmin(np.abs(bp - x)))
        if abs(bp[i] - x) > 1e-12:
            raise NotMarkovError(f"image endpoint {x} off the partition")
        return i

    cols = []
    for j in range(m):
        a = cell_index(markov_map.image_lo[j])
        b = cell_index(markov_map.image_hi[j])
        cols.append(TowerColumn(
            mass=float(lengths[j]),
            return_time=1,
            target=tuple(range(a, b)),
        ))
    return TowerSpec(
        columns=tuple(cols),
        beta=beta,
        c0=float(lengths.sum()),
        theta0=theta0,
        holes=frozenset((0, int(c)) for c in hole_cells),
        l_trunc=1,
    )


# -- tail masses ---------------------------------------------------------------


@dataclass
class TailReport:
    rows: list          # (L, tail_mass)
    envelope_ratio: float
    bound: float
    ok: bool

    def to_json(self) -> dict:
        return {
            "rows": [[int(l), float(t)] for l, t in self.rows],
            "envelope_ratio": self.envelope_ratio,
            "bound": self.bound,
            "ok": self.ok,
        }


def tail_mass_check(tower: Tower, h: TowerFunction | None = None,
                    theta_star: float | None = None,
                    slack: float = 0.05) -> TailReport:
    """Level tails of the conditionally invariant measure proxy h*m.

    Reports the mass above each level and checks the successive-tail
    ratio against theta0/beta plus slack.  Flat towers have zero tails
    and pass trivially.
    """
    if h is None:
        theta_star, h, _ = leading_eigenpair(tower)
    frac = tower.depth_tables(h.depth)["mass_frac"][h.depth]
    level_mass = {}
    for (l, j), v in h.values.items():
        level_mass[l] = (
            level_mass.get(l, 0.0) + float(v @ frac[j]) * tower.masses[j]
        )
    lmax = max(level_mass)
    rows = []
    for big_l in range(0, lmax + 1):
        tail = sum(mass for l, mass in level_mass.items() if l > big_l)
        rows.append((big_l, float(tail)))
    ratios = [
        rows[i + 1][1] / rows[i][1]
        for i in range(len(rows) - 1)
        if rows[i][1] > 1e-300 and rows[i + 1][1] > 0
    ]
    envelope = max(ratios) if ratios else 0.0
    bound = tower.theta0 / tower.beta + slack
    ok = envelope <= bound
    if not ok:
        raise BadTailError(
            f"tail envelope ratio {envelope:.6g} exceeds "
            f"theta0/beta + {slack} = {bound:.6g}"
        )
    return TailReport(rows=rows, envelope_ratio=float(envelope),
                      bound=float(bound), ok=ok)


# -- serialization -------------------------------------------------------------


def tower_spec_to_json(spec: TowerSpec) -> dict:
    cells = []
    for c in spec.columns:
        entry = {"mass": float(c.mass), "return": int(c.return_time)}
        if c.target is not None:
            entry["target"] = [int(j) for j in c.target]
        if c.jacobian is not None:
            entry["jacobian"] = float(c.jacobian)
        cells.append(entry)
    out = {
        "levels": [{"cells": cells}],
        "hole": sorted([int(l), int(j)] for l, j in spec.holes),
        "beta": float(spec.beta),
        "C0": float(spec.c0),
        "theta0": float(spec.theta0),
        "C1": float(spec.c1),
    }
    if spec.l_trunc is not None:
        out["L_trunc"] = int(spec.l_trunc)
    return out


def tower_spec_from_json(obj) -> TowerSpec:
    try:
        levels = obj["levels"]
        if len(levels) != 1:
            raise ConfigError(
                "tower JSON carries exactly one levels entry (the base); "
                f"got {len(levels)}"
            )
        cols = []
        for c in levels[0]["cells"]:
            cols.append(TowerColumn(
                mass=float(c["mass"]),
                return_time=int(c["return"]),
                target=(tuple(int(j) for j in c["target"])
                        if "target" in c else None),
                jacobian=(float(c["jacobian"]) if "jacobian" in c else None),
            ))
        return TowerSpec(
            columns=tuple(cols),
            beta=float(obj["beta"]),
            c0=float(obj["C0"]),
            theta0=float(obj["theta0"]),
            holes=frozenset(
                (int(l), int(j)) for l, j in obj.get("hole", [])
            ),
            c1=float(obj.get("C1", 0.0)),
            l_trunc=(int(obj["L_trunc"]) if "L_trunc" in obj else None),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"malformed tower spec: {exc}") from exc


def golden_tower_spec() -> TowerSpec:
    """Doubling map on quarters with the first quarter removed.

    Flat tower over four equal base cells; the return branch of each
    cell covers the half-interval the doubling map sends it to.  The
    dominant survival factor is (1+sqrt(5))/4.
    """
    return TowerSpec(
        columns=(
            TowerColumn(mass=0.25, return_time=1, target=(0, 1)),
            TowerColumn(mass=0.25, return_time=1, target=(2, 3)),
            TowerColumn(mass=0.25, return_time=1, target=(0, 1)),
            TowerColumn(mass=0.25, return_time=1, target=(2, 3)),
        ),
        beta=0.8,
        c0=1.0,
        theta0=0.5,
        holes=frozenset({(0, 0)}),
        l_trunc=1,
    )


def golden_interval_map() -> MarkovIntervalMap:
    """The doubling map on the quarter partition of the unit interval."""
    return MarkovIntervalMap(
        breakpoints=(0.0, 0.25, 0.5, 0.75, 1.0),
        image_lo=(0.0, 0.5, 0.0, 0.5),
        image_hi=(0.5, 1.0, 0.5, 1.0),
    )


def random_tower_spec(rng, max_cols: int = 5, max_return: int = 5,
                      max_tries: int = 200) -> TowerSpec:
    """Random valid tower with holes strictly above the base.

    Draws column counts, masses, and return times, then places holes at
    levels >= 1 while keeping the weighted hole-mass condition strict,
    so the eigenvalue lower bound is never vacuous.  Retries until the
    mixing check passes.
    """
    for _ in range(max_tries):
        ncols = int(rng.integers(2, max_cols + 1))
        returns = rng.integers(1, max_return + 1, size=ncols)
        returns[int(rng.integers(0, ncols))] = 1  # keep a fast loop around
        masses = 0.2 + rng.random(ncols)
        theta0 = 0.75
        c0 = 0.0
        total = float(masses.sum())
        for n in range(0, int(returns.max()) + 1):
            above = float(masses[returns > n].sum())
            c0 = max(c0, above / theta0 ** n)
        beta = theta0 + (1.0 - theta0) * (0.3 + 0.5 * rng.random())
        budget = (1.0 - beta) * total  # C1 = 0
        candidates = [
            (l, j) for j in range(ncols) for l in range(1, int(returns[j]))
        ]
        if not candidates:
            continue
        rng.shuffle(candidates)
        holes = set()
        lhs = 0.0
        for (l, j) in candidates:
            add = beta ** (-(l - 1)) * masses[j]
            if lhs + add < 0.9 * budget:
                holes.add((l, int(j)))
                lhs += add
                if rng.random() < 0.5:
                    break
        if not holes:
            continue
        spec = TowerSpec(
            columns=tuple(
                TowerColumn(mass=float(masses[j]),
                            return_time=int(returns[j]))
                for j in range(ncols)
            ),
            beta=float(beta),
            c0=float(c0 * 1.0000001),
            theta0=theta0,
            holes=frozenset(holes),
        )
        try:
            build_tower(spec)
        except (NotMixingError, HoleTooBigError, BadTailError):
            continue
        return spec
    raise NoConvergenceError("could not draw a valid random tower")
