"""Discretized metric measure spaces, scalar fields and continuity moduli."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from omlab import expr as _expr

GRID = "euclidean-grid"
ATOMS = "atom-set"
PATHS = "path-lattice"

MAX_POINTS = 10**7
MAX_PATH_STEPS = 4096


@dataclass(frozen=True, eq=False)
class SampledSpace:
    """A discretized ambient space ``X`` with its base metric and base cells.

    For grids and atom sets ``points`` enumerates the space. A path lattice is
    a continuum of paths on a fixed time grid; there ``points`` holds only the
    designated center paths (the evaluation set) and ``graph`` is ``None``.
    """

    kind: str
    points: np.ndarray
    cell_volumes: np.ndarray
    graph: sparse.csr_matrix | None
    eval_set: np.ndarray
    axes: tuple[np.ndarray, ...] | None = None
    times: np.ndarray | None = None
    labels: tuple[str, ...] = ()
    _tree: list = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        if self.axes is None:
            return (self.size,)
        return tuple(len(a) for a in self.axes)

    @property
    def spacing(self) -> np.ndarray:
        if self.axes is None:
            raise ValueError(f"{self.kind} has no grid spacing")
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def cell_volume(self) -> float:
        """Nominal volume of an interior grid cell (product of spacings)."""
        return float(np.prod(self.spacing))

    @property
    def steps(self) -> int:
        return len(self.times)

    @property
    def terminal_time(self) -> float:
        return float(self.times[-1])

    @property
    def lower(self) -> np.ndarray:
        return np.array([a[0] for a in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([a[-1] for a in self.axes])

    def locate(self, x) -> int:
        """Index of a point given as an index, a label, or coordinates.

        Coordinates snap to the nearest stored point.
        """
        if isinstance(x, (int, np.integer)):
            if not 0 <= x < self.size:
                raise IndexError(f"point index {x} out of range")
            return int(x)
        if isinstance(x, str):
            if x in self.labels:
                return self.labels.index(x)
            raise KeyError(f"unknown point label {x!r}")
        coords = np.asarray(x, dtype=float).reshape(-1)
        if coords.size != self.dim:
            raise ValueError(f"expected {self.dim} coordinates, got {coords.size}")
        if self.kind == GRID:
            idx = []
            for a, c in zip(self.axes, coords):
                if c < a[0] - 1e-12 or c > a[-1] + 1e-12:
                    raise ValueError(f"point {coords.tolist()} outside the grid box")
                idx.append(int(np.clip(np.rint((c - a[0]) / (a[1] - a[0])), 0, len(a) - 1)))
            return int(np.ravel_multi_index(idx, self.shape))
        dist, i = self._kdtree().query(coords)
        return int(i)

    def coords(self, x) -> np.ndarray:
        return self.points[self.locate(x)]

    def _kdtree(self) -> cKDTree:
        if not self._tree:
            self._tree.append(cKDTree(self.points))
        return self._tree[0]

    def within(self, center, radius: float) -> np.ndarray:
        """Indices of stored points at Euclidean distance ``<= radius``."""
        c = self.coords(center) if not isinstance(center, np.ndarray) else center
        return np.asarray(sorted(self._kdtree().query_ball_point(c, radius)), dtype=int)


def _stencil(ndim: int) -> list[tuple[int, ...]]:
    # 1-D: nearest neighbours are exact; 2-D: king + knight moves (16);
    # 3-D and up: the full 3^n - 1 cube.
    if ndim == 1:
        return [(1,), (-1,)]
    if ndim == 2:
        offs = [o for o in itertools.product((-1, 0, 1), repeat=2) if o != (0, 0)]
        offs += [(a, b) for a in (-2, -1, 1, 2) for b in (-2, -1, 1, 2) if abs(a) != abs(b)]
        return offs
    return [o for o in itertools.product((-1, 0, 1), repeat=ndim) if any(o)]


def _grid_graph(shape: tuple[int, ...], spacing: np.ndarray, stencil) -> sparse.csr_matrix:
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    rows, cols, lens = [], [], []
    for off in stencil:
        src = tuple(slice(max(0, -o), s - max(0, o)) for o, s in zip(off, shape))
        dst = tuple(slice(max(0, o), s - max(0, -o)) for o, s in zip(off, shape))
        a, b = idx[src].ravel(), idx[dst].ravel()
        if a.size == 0:
            continue
        rows.append(a)
        cols.append(b)
        lens.append(np.full(a.size, float(np.linalg.norm(np.asarray(off) * spacing))))
    m = idx.size
    g = sparse.csr_matrix(
        (np.concatenate(lens), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    )
    g.sort_indices()
    return g


def build_grid(
    lower: Sequence[float],
    upper: Sequence[float],
    resolution: int | Sequence[int],
    *,
    eval_points: Sequence | None = None,
    stencil: Sequence[tuple[int, ...]] | None = None,
    max_points: int = MAX_POINTS,
) -> SampledSpace:
    """Regular grid on an axis-aligned box.

    Quadrature weights follow the trapezoid rule: interior nodes carry the
    nominal cell volume (product of spacings), boundary nodes the matching
    fraction, so that the weights sum to the box volume.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape:
        raise ValueError("lower and upper corners differ in dimension")
    if np.any(upper <= lower):
        raise ValueError("degenerate box: need upper > lower on every axis")
    res = np.broadcast_to(np.asarray(resolution, dtype=int), lower.shape)
    if np.any(res < 2):
        raise ValueError("resolution must be at least 2 per axis")
    total = math.prod(int(r) for r in res)
    if total > max_points:
        raise ValueError(f"grid of {total} points exceeds the cap of {max_points}")

    axes = tuple(np.linspace(lo, hi, int(n)) for lo, hi, n in zip(lower, upper, res))
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    spacing = (upper - lower) / (res - 1)

    weights_1d = []
    for n, h in zip(res, spacing):
        w = np.full(int(n), h)
        w[0] = w[-1] = h / 2
        weights_1d.append(w)
    vol = weights_1d[0]
    for w in weights_1d[1:]:
        vol = np.multiply.outer(vol, w)
    graph = _grid_graph(tuple(int(n) for n in res), spacing, stencil or _stencil(lower.size))

    space = SampledSpace(
        kind=GRID,
        points=points,
        cell_volumes=np.ravel(vol),
        graph=graph,
        eval_set=np.arange(0),
        axes=axes,
    )
    if eval_points is None:
        return space
    ev = np.array([space.locate(p) for p in eval_points], dtype=int)
    return _with_eval(space, ev)


def _with_eval(space: SampledSpace, eval_set: np.ndarray) -> SampledSpace:
    return SampledSpace(
        kind=space.kind,
        points=space.points,
        cell_volumes=space.cell_volumes,
        graph=space.graph,
        eval_set=np.asarray(eval_set, dtype=int),
        axes=space.axes,
        times=space.times,
        labels=space.labels,
    )


def build_atoms(
    coords: Sequence,
    masses: Sequence[float],
    labels: Sequence[str] | None = None,
) -> SampledSpace:
    """Discrete space of weighted atoms with the Euclidean base metric.

    The neighbor graph is complete, so conformal distances between atoms
    are shortest weighted chains of straight hops.
    """
    pts = np.asarray(coords, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    masses = np.asarray(masses, dtype=float)
    if masses.shape != (pts.shape[0],):
        raise ValueError("one mass per atom required")
    if np.any(masses <= 0) or not np.isfinite(masses.sum()):
        raise ValueError("atom masses must be positive and finite")
    if labels is not None and len(labels) != len(pts):
        raise ValueError("one label per atom required")
    if len(np.unique(pts, axis=0)) != len(pts):
        raise ValueError("atoms must be distinct")
    m = len(pts)
    i, j = np.triu_indices(m, k=1)
    d = np.linalg.norm(pts[i] - pts[j], axis=1)
    graph = sparse.csr_matrix(
        (np.concatenate([d, d]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(m, m)
    )
    graph.sort_indices()
    return SampledSpace(
        kind=ATOMS,
        points=pts,
        cell_volumes=masses,
        graph=graph,
        eval_set=np.arange(m),
        labels=tuple(labels) if labels is not None else (),
    )


def build_path_lattice(
    steps: int,
    terminal_time: float = 1.0,
    centers: Sequence[str] = ("0",),
) -> SampledSpace:
    """Piecewise-linear paths on the uniform time grid ``t_i = i T / steps``.

    Paths start at 0 and are represented by their values at ``t_1..t_steps``;
    the base metric is the sup norm. ``centers`` are expressions in ``t``
    defining the evaluation set.
    """
    if int(steps) != steps or steps < 2:
        raise ValueError("a path lattice needs at least 2 steps")
    if steps > MAX_PATH_STEPS:
        raise ValueError(f"{steps} steps exceeds the cap of {MAX_PATH_STEPS}")
    if terminal_time <= 0:
        raise ValueError("terminal_time must be positive")
    times = terminal_time * np.arange(1, steps + 1) / steps
    paths = np.stack([center_path(c, times) for c in centers]) if centers else np.zeros((0, steps))
    return SampledSpace(
        kind=PATHS,
        points=paths,
        cell_volumes=np.zeros(len(paths)),
        graph=None,
        eval_set=np.arange(len(paths)),
        times=times,
        labels=tuple(str(c) for c in centers),
    )


def center_path(source: str, times: np.ndarray) -> np.ndarray:
    """Evaluate an expression in ``t`` on the lattice times."""
    e = _expr.parse(source)
    if e.names - {"t"}:
        raise _expr.ExpressionError(f"center path {source!r} may only use t")
    vals = np.broadcast_to(np.asarray(e.evaluate({"t": times}), dtype=float), times.shape)
    start = np.asarray(e.evaluate({"t": np.zeros(1)}), dtype=float).reshape(-1)[0]
    if abs(start) > 1e-12:
        raise ValueError(f"center path {source!r} must start at 0")
    return np.array(vals)


def cameron_martin_energy(path: np.ndarray, times: np.ndarray) -> float:
    """Half the squared Cameron-Martin norm of a piecewise-linear path from 0."""
    full = np.concatenate([[0.0], path])
    grid = np.concatenate([[0.0], times])
    return float(0.5 * np.sum(np.diff(full) ** 2 / np.diff(grid)))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """A real function on a space: nodal values plus an evaluation rule.

    Fields built from an expression evaluate it exactly anywhere in the
    domain; value-only fields interpolate (multilinear on grids, nearest
    stored point otherwise). On a path lattice a field is a functional of
    whole paths.
    """

    space: SampledSpace
    values: np.ndarray
    expression: _expr.Expression | None = None

    def __post_init__(self):
        if self.values.shape != (self.space.size,):
            raise ValueError("one value per stored point required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def is_constant(self) -> bool:
        if self.expression is not None:
            return self.expression.is_constant
        return bool(np.ptp(self.values) == 0) if self.values.size else True

    @property
    def constant_value(self) -> float:
        if not self.is_constant:
            raise ValueError("field is not constant")
        if self.expression is not None:
            return float(self.expression.evaluate({}))
        return float(self.values[0])

    def __call__(self, coords) -> np.ndarray:
        """Evaluate at coordinates (rows) or, on a path lattice, at paths."""
        arr = np.atleast_2d(np.asarray(coords, dtype=float))
        if self.expression is None:
            return self.interpolate(arr)
        if self.expression.is_constant:
            return np.full(arr.shape[0], float(self.expression.evaluate({})))
        if self.space.kind == PATHS:
            env = _expr.path_env(arr, self.space.times)
        else:
            env = _expr.coordinate_env(arr)
        out = self.expression.evaluate(env)
        return np.broadcast_to(np.asarray(out, dtype=float), (arr.shape[0],)).copy()

    def at(self, x) -> float:
        return float(self.values[self.space.locate(x)])

    def interpolate(self, coords) -> np.ndarray:
        arr = np.atleast_2d(np.asarray(coords, dtype=float))
        if self.space.kind == GRID:
            interp = RegularGridInterpolator(
                self.space.axes, self.values.reshape(self.space.shape), method="linear"
            )
            return interp(arr)
        if self.space.size == 0:
            raise ValueError("no stored points to interpolate from")
        _, idx = self.space._kdtree().query(arr)
        return self.values[idx]


def field_from_expression(space: SampledSpace, source: str) -> ScalarField:
    e = _expr.parse(source)
    if space.kind == PATHS:
        if e.names - set(_expr.PATH_PRIMITIVES):
            raise _expr.ExpressionError(
                f"{source!r}: path functionals may only use {', '.join(_expr.PATH_PRIMITIVES)}"
            )
    else:
        if e.names & (set(_expr.PATH_PRIMITIVES) | {"t"}):
            raise _expr.ExpressionError(f"{source!r}: path primitives need a path lattice")
        if e.max_coordinate > space.dim:
            raise _expr.ExpressionError(f"{source!r}: space has only {space.dim} coordinates")
    probe = ScalarField(space, np.zeros(space.size), e)
    values = probe(space.points) if space.size else np.zeros(0)
    return ScalarField(space, np.asarray(values, dtype=float), e)


def field_from_values(space: SampledSpace, values) -> ScalarField:
    return ScalarField(space, np.asarray(values, dtype=float).reshape(-1))


def constant_field(space: SampledSpace, c: float) -> ScalarField:
    return field_from_expression(space, repr(float(c)))


def as_field(space: SampledSpace, f) -> ScalarField | None:
    """Coerce ``None``, numbers, expression strings or fields to a field."""
    if f is None or isinstance(f, ScalarField):
        if isinstance(f, ScalarField) and f.space is not space:
            raise ValueError("field belongs to a different space")
        return f
    if isinstance(f, (int, float, np.floating)):
        return constant_field(space, float(f))
    if isinstance(f, str):
        return field_from_expression(space, f)
    return field_from_values(space, f)


def read_csv_space(path: str | Path, mass_column: str = "mass"):
    """Load points and field columns from a CSV with a header row.

    Coordinate columns are named ``x1..xn``. A complete regular lattice of
    points becomes a Euclidean grid; anything else becomes an atom set
    weighted by ``mass_column`` (default mass 1). Returns ``(space, fields)``
    with one :class:`ScalarField` per remaining column.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    coord_cols = sorted(
        (c for c in header if _expr._COORD.match(c)), key=lambda c: int(c[1:])
    )
    if not coord_cols:
        raise ValueError(f"{path}: no coordinate columns x1..xn in header")
    if coord_cols != [f"x{i + 1}" for i in range(len(coord_cols))]:
        raise ValueError(f"{path}: coordinate columns must be x1..xn without gaps")
    try:
        pts = np.array([[float(r[c]) for c in coord_cols] for r in rows])
        data = {
            c: np.array([float(r[c]) for r in rows])
            for c in header
            if c not in coord_cols
        }
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None

    axes = [np.unique(pts[:, k]) for k in range(pts.shape[1])]
    regular = math.prod(len(a) for a in axes) == len(pts) and all(
        len(a) >= 2 and np.allclose(np.diff(a), a[1] - a[0], rtol=1e-9) for a in axes
    )
    if regular:
        space = build_grid([a[0] for a in axes], [a[-1] for a in axes], [len(a) for a in axes])
        order = [space.locate(p) for p in pts]
        perm = np.empty(len(pts), dtype=int)
        perm[order] = np.arange(len(pts))
        data = {k: v[perm] for k, v in data.items()}
        data.pop(mass_column, None)
    else:
        masses = data.pop(mass_column, np.ones(len(pts)))
        space = build_atoms(pts, masses)
    return space, {k: field_from_values(space, v) for k, v in data.items()}


@dataclass(frozen=True)
class ContinuityModulus:
    """Empirical nondecreasing modulus of continuity around ``center``.

    ``bounds[k]`` bounds ``|f(y) - f(center)|`` for all sampled ``y`` with
    ``d0(center, y) <= breakpoints[k]``.
    """

    center: np.ndarray
    scope_radius: float
    breakpoints: np.ndarray
    bounds: np.ndarray

    def __call__(self, r: float) -> float:
        if r < 0:
            raise ValueError("radius must be nonnegative")
        if r > self.scope_radius * (1 + 1e-12):
            raise ValueError(f"radius {r} outside the modulus scope {self.scope_radius}")
        k = int(np.searchsorted(self.breakpoints, r, side="left"))
        return float(self.bounds[min(k, len(self.bounds) - 1)])

    def vanishes(self, tol: float) -> bool:
        return bool(self.bounds[0] <= tol)

    def scaled(self, factor: float) -> "ContinuityModulus":
        return ContinuityModulus(self.center, self.scope_radius, self.breakpoints, self.bounds * factor)


def estimate_modulus(
    f: ScalarField,
    center,
    scope_radius: float,
    sample_count: int | None = None,
    *,
    bins: int = 32,
    seed: int = 0,
) -> ContinuityModulus:
    """Least nondecreasing envelope of ``|f(y) - f(center)|`` binned by ``d0``.

    On grids the samples are the nodes and the graph-edge midpoints inside
    the scope (edge midpoints are where conformal edge weights evaluate the
    field); ``sample_count`` subsamples them. On atom sets the samples are
    the atoms. On a path lattice, ``sample_count`` random paths are drawn
    inside the sup-norm ball of the scope.
    """
    if scope_radius <= 0:
        raise ValueError("scope_radius must be positive")
    space = f.space
    rng = np.random.default_rng(seed)
    if space.kind == PATHS:
        c = np.asarray(center, dtype=float) if not isinstance(center, (int, str)) else space.coords(center)
        n = sample_count or 4000
        incr = rng.standard_normal((n, space.steps))
        g = np.cumsum(incr, axis=1)
        g /= np.abs(g).max(axis=1, keepdims=True)
        ys = c + scope_radius * rng.uniform(0, 1, (n, 1)) * g
        dist = np.abs(ys - c).max(axis=1)
        f0 = float(f(c[None, :])[0])
    else:
        ci = space.locate(center)
        c = space.points[ci]
        nodes = space.within(c, scope_radius)
        ys = space.points[nodes]
        if space.kind == GRID and space.graph is not None:
            sub = space.graph[nodes]
            rows = np.repeat(nodes, np.diff(sub.indptr))
            cols = sub.indices
            keep = rows < cols
            mids = 0.5 * (space.points[rows[keep]] + space.points[cols[keep]])
            ys = np.concatenate([ys, mids])
        dist = np.linalg.norm(ys - c, axis=1)
        inside = dist <= scope_radius
        ys, dist = ys[inside], dist[inside]
        if sample_count is not None and len(ys) > sample_count:
            pick = np.sort(rng.choice(len(ys), sample_count, replace=False))
            ys, dist = ys[pick], dist[pick]
        f0 = float(f(c[None, :])[0])
    diffs = np.abs(f(ys) - f0)

    edges = np.linspace(0.0, scope_radius, bins + 1)[1:]
    which = np.minimum(np.searchsorted(edges, dist, side="left"), bins - 1)
    populated = np.unique(which[dist > 0])
    if len(populated) < 2:
        raise ValueError("fewer than 2 radius bins populated; enlarge scope or sampling")
    raw = np.zeros(bins)
    np.maximum.at(raw, which, diffs)
    return ContinuityModulus(
        center=np.array(c),
        scope_radius=float(scope_radius),
        breakpoints=edges,
        bounds=np.maximum.accumulate(raw),
    )


BASE_METRICS = ("euclidean", "sup-norm")
BASE_MEASURES = ("lebesgue", "atoms", "gaussian-path")


@dataclass(frozen=True, eq=False)
class MetricSpec:
    """``d = exp(-U) d0``; ``conformal_weight=None`` means ``d = d0``."""

    space: SampledSpace
    base: str = "euclidean"
    conformal_weight: ScalarField | None = None

    def __post_init__(self):
        if self.base not in BASE_METRICS:
            raise ValueError(f"unknown base metric {self.base!r}")
        expected = "sup-norm" if self.space.kind == PATHS else "euclidean"
        if self.base != expected:
            raise ValueError(f"{self.space.kind} requires base metric {expected!r}")
        U = self.conformal_weight
        if U is not None:
            if U.space is not self.space:
                raise ValueError("conformal weight lives on a different space")
            if not np.all(np.isfinite(U.values)):
                raise ValueError("conformal weight must be finite")

    def weight_at(self, coords) -> np.ndarray:
        if self.conformal_weight is None:
            return np.zeros(np.atleast_2d(coords).shape[0])
        return self.conformal_weight(coords)


def metric(space: SampledSpace, U=None) -> MetricSpec:
    base = "sup-norm" if space.kind == PATHS else "euclidean"
    return MetricSpec(space, base, as_field(space, U))


@dataclass(frozen=True, eq=False)
class MeasureSpec:
    """``mu = scale * exp(-V) mu0`` on ``space``.

    ``mu0`` is the cell quadrature of Lebesgue measure on grids, the atom
    masses on atom sets, and Brownian motion (covariance ``min(s, t)``) on
    path lattices. Path measures carry their Monte Carlo settings;
    ``method="transfer"`` switches to deterministic lattice quadrature.
    """

    space: SampledSpace
    base: str
    tilt: ScalarField | None = None
    scale: float = 1.0
    samples: int = 100_000
    seed: int = 0
    partitions: int = 16
    workers: int = 1
    method: str | None = None

    def __post_init__(self):
        if self.base not in BASE_MEASURES:
            raise ValueError(f"unknown base measure {self.base!r}")
        expected = {GRID: "lebesgue", ATOMS: "atoms", PATHS: "gaussian-path"}[self.space.kind]
        if self.base != expected:
            raise ValueError(f"{self.space.kind} requires base measure {expected!r}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("measure scale must be positive and finite")
        if self.tilt is not None and self.tilt.space is not self.space:
            raise ValueError("tilt lives on a different space")
        if self.base == "gaussian-path":
            if self.samples < 1 or self.partitions < 1 or self.workers < 1:
                raise ValueError("samples, partitions and workers must be positive")
            if self.method not in (None, "monte-carlo", "transfer"):
                raise ValueError(f"unknown path method {self.method!r}")

    @property
    def path_method(self) -> str:
        return self.method or "monte-carlo"

    def covariance(self) -> np.ndarray:
        t = self.space.times
        return np.minimum.outer(t, t)

    def point_weights(self) -> np.ndarray:
        """Per-point mass ``scale * exp(-V) * cell volume`` (grids and atoms)."""
        if self.space.kind == PATHS:
            raise ValueError("path measures have no point weights")
        w = self.scale * self.space.cell_volumes
        if self.tilt is not None:
            w = w * np.exp(-self.tilt.values)
        return w


def measure(space: SampledSpace, V=None, **kwargs) -> MeasureSpec:
    base = {GRID: "lebesgue", ATOMS: "atoms", PATHS: "gaussian-path"}[space.kind]
    return MeasureSpec(space, base, as_field(space, V), **kwargs)
