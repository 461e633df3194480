"""Conformal geodesic distances ``d = exp(-U) d0`` and metric balls.

Distances on grids and atom sets are shortest paths in the neighbor graph
with edge weights ``exp(-U(midpoint)) * d0(edge)``; constant weights use the
exact straight-line distance. A path lattice has no
graph; its conformal balls are base sup-norm balls with the radius scaled by
``exp(U(center))``, optionally bracketed by a continuity modulus.
"""

from __future__ import annotations

import csv
import weakref
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

from omlab.spaces import (
    PATHS,
    ContinuityModulus,
    MetricSpec,
    SampledSpace,
    ScalarField,
    metric as make_metric,
)

_RTOL = 1e-12
# closed balls admit points within this relative slack of the radius, so
# nodes lying exactly on a sphere are not split by rounding
BOUNDARY_SLACK = 1e-9
_graph_cache: "weakref.WeakKeyDictionary[MetricSpec, tuple]" = weakref.WeakKeyDictionary()


def conformal_graph(metric: MetricSpec) -> tuple[sparse.csr_matrix, float]:
    """Edge-weighted graph for ``metric`` and the largest ``U`` at an edge midpoint.

    A constant weight ``U = c`` scales base edge lengths by ``exp(-c)``; the
    returned graph is then the base graph and the scale is applied to
    distances instead, which keeps ``B(r) = B0(r e^c)`` exact in floating point.
    """
    hit = _graph_cache.get(metric)
    if hit is not None:
        return hit
    space = metric.space
    if space.graph is None:
        raise ValueError(f"{space.kind} has no neighbor graph")
    g = space.graph
    U = metric.conformal_weight
    if U is None:
        out = (g, 0.0)
    elif U.is_constant:
        out = (g, U.constant_value)
    else:
        rows = np.repeat(np.arange(g.shape[0]), np.diff(g.indptr))
        mids = 0.5 * (space.points[rows] + space.points[g.indices])
        u_mid = U(mids)
        w = sparse.csr_matrix((g.data * np.exp(-u_mid), g.indices, g.indptr), shape=g.shape)
        out = (w, float(max(u_mid.max(), U.values.max())))
    _graph_cache[metric] = out
    return out


def _scale(metric: MetricSpec) -> float:
    U = metric.conformal_weight
    if U is not None and U.is_constant:
        return float(np.exp(-U.constant_value))
    return 1.0


def distances_from(
    metric: MetricSpec, x, limit: float = np.inf, *, exact: bool = True
) -> np.ndarray:
    """Conformal distance from ``x`` to every stored point (``inf`` beyond ``limit``).

    With a constant weight the geodesics are straight segments (the grid box
    is convex and atom graphs are complete), so by default those distances
    are computed exactly instead of through the stencil. ``exact=False``
    forces the graph route, which is the consistent choice when comparing
    against graph distances for a nonconstant weight.
    """
    space = metric.space
    src = space.locate(x)
    s = _scale(metric)
    U = metric.conformal_weight
    if exact and (U is None or U.is_constant):
        d = np.linalg.norm(space.points - space.points[src], axis=1) * s
    else:
        g, _ = conformal_graph(metric)
        lim = np.inf if not np.isfinite(limit) else limit / s * (1 + 1e-9)
        d = dijkstra(g, directed=True, indices=src, limit=lim) * s
    if np.isfinite(limit):
        d[d > limit * (1 + 1e-9)] = np.inf
    return d


def conformal_distance(space: SampledSpace, U: ScalarField | None, x, y) -> float:
    """Graph approximation of ``d(x, y)``; ``inf`` if the points are disconnected."""
    m = make_metric(space, U)
    return float(distances_from(m, x)[space.locate(y)])


@dataclass(frozen=True)
class PolyPath:
    vertices: np.ndarray
    base_length: float
    conformal_length: float


def polypath(space: SampledSpace, U: ScalarField | None, vertices) -> PolyPath:
    """Lengths of the polygonal path through ``vertices`` (indices or coordinates)."""
    pts = np.array([space.coords(v) for v in vertices])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    base = float(seg.sum())
    if U is None or len(pts) < 2:
        return PolyPath(pts, base, base)
    mids = 0.5 * (pts[1:] + pts[:-1])
    return PolyPath(pts, base, float(np.sum(np.exp(-U(mids)) * seg)))


def geodesic_path(space: SampledSpace, U: ScalarField | None, x, y) -> PolyPath:
    """A shortest graph path from ``x`` to ``y`` under ``exp(-U) d0``."""
    m = make_metric(space, U)
    g, _ = conformal_graph(m)
    src, dst = space.locate(x), space.locate(y)
    _, pred = dijkstra(g, directed=True, indices=src, return_predecessors=True)
    if dst != src and pred[dst] < 0:
        raise ValueError("points are disconnected")
    chain = [dst]
    while chain[-1] != src:
        chain.append(int(pred[chain[-1]]))
    return polypath(space, U, chain[::-1])


@dataclass(frozen=True, eq=False)
class BallRegion:
    """Closed metric ball ``B(radius, center)``.

    On grids and atom sets ``members`` lists point indices (sorted) with their
    distances. On a path lattice membership is a predicate: a path belongs if
    its sup distance to the center is at most ``base_radius``;
    ``base_interval`` brackets that radius when a modulus was supplied.
    """

    center: int
    radius: float
    metric: MetricSpec
    members: np.ndarray | None
    distances: np.ndarray | None
    saturated: bool = False
    base_radius: float | None = None
    base_interval: tuple[float, float] | None = None

    @property
    def space(self) -> SampledSpace:
        return self.metric.space

    def contains(self, paths) -> np.ndarray:
        if self.members is not None:
            idx = np.atleast_1d(paths)
            return np.isin(idx, self.members)
        c = self.space.points[self.center]
        arr = np.atleast_2d(paths)
        return np.abs(arr - c).max(axis=1) <= self.base_radius


def metric_ball(
    space: SampledSpace,
    metric: MetricSpec,
    x,
    r: float,
    modulus: ContinuityModulus | None = None,
) -> BallRegion:
    if r <= 0:
        raise ValueError("ball radius must be positive")
    if metric.space is not space:
        raise ValueError("metric belongs to a different space")
    center = space.locate(x)
    if space.kind == PATHS:
        u = float(metric.weight_at(space.points[center][None, :])[0])
        interval = None
        if modulus is not None:
            w = modulus(min(r * np.exp(u), modulus.scope_radius))
            interval = (r * np.exp(u - w), r * np.exp(u + w))
        return BallRegion(center, r, metric, None, None, False, r * np.exp(u), interval)
    d = distances_from(metric, center, limit=r)
    members = np.flatnonzero(d <= r * (1 + BOUNDARY_SLACK))
    return BallRegion(
        center, r, metric, members, d[members], saturated=len(members) == space.size
    )


def export_ball_csv(ball: BallRegion, path: str | Path) -> None:
    if ball.members is None:
        raise ValueError("path-lattice balls have no enumerated members")
    pts = ball.space.points[ball.members]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point_id", *[f"x{i + 1}" for i in range(pts.shape[1])], "distance"])
        for i, p, d in zip(ball.members, pts, ball.distances):
            w.writerow([int(i), *[repr(float(v)) for v in p], repr(float(d))])


@dataclass(frozen=True)
class SandwichReport:
    holds: bool
    inner_radius: float
    outer_radius: float
    modulus_value: float
    missing_inner: np.ndarray
    outside_outer: np.ndarray

    @property
    def witnesses(self) -> np.ndarray:
        return np.union1d(self.missing_inner, self.outside_outer)


def sandwich_check(
    space: SampledSpace,
    U: ScalarField,
    x,
    r: float,
    omega: ContinuityModulus,
) -> SandwichReport:
    """Check ``B0(r e^{U(x)-w}) ⊆ B(r) ⊆ B0(r e^{U(x)+w})`` on the grid.

    ``w`` is the modulus at the outer scale ``R = r exp(max U)``, which
    contains every conformal path of length ``r``.
    """
    m = make_metric(space, U)
    base = make_metric(space, None)
    xi = space.locate(x)
    _, u_max = conformal_graph(m)
    if U is not None and U.is_constant:
        u_max = U.constant_value
    u_max = max(u_max, float(U.values.max()) if U is not None else 0.0)
    R = r * np.exp(u_max)
    if R > omega.scope_radius * (1 + 1e-12):
        raise ValueError(f"modulus scope {omega.scope_radius} below required {R}")
    w = omega(R)
    ux = float(U.values[xi]) if U is not None else 0.0
    inner, outer = r * np.exp(ux - w), r * np.exp(ux + w)

    # both sides through the stencil, so only the weight differs
    d = distances_from(m, xi, limit=r, exact=False)
    d0 = distances_from(base, xi, limit=outer * (1 + 1e-6), exact=False)
    in_ball = d <= r * (1 + _RTOL)
    in_inner = d0 <= inner * (1 - _RTOL)
    in_outer = d0 <= outer * (1 + _RTOL)
    missing = np.flatnonzero(in_inner & ~in_ball)
    extra = np.flatnonzero(in_ball & ~in_outer)
    return SandwichReport(
        holds=missing.size == 0 and extra.size == 0,
        inner_radius=float(inner),
        outer_radius=float(outer),
        modulus_value=float(w),
        missing_inner=missing,
        outside_outer=extra,
    )
