"""Masses of metric balls.

Three backends:

* ``quadrature``: grids, sum of ``exp(-V) * cell volume`` over member nodes;
* ``atom-sum``: atom sets, sum of tilted atom masses;
* ``monte-carlo``: Brownian motion on a path lattice, sampled exactly through
  the Cholesky factor of ``min(s, t)``.

Path lattices also have a deterministic ``transfer`` backend that propagates
the Gaussian transition kernel through the per-time windows of a sup-norm
ball with Gauss-Legendre quadrature. It resolves probabilities far below the
Monte Carlo floor and serves as an independent check on the sampler.
"""

from __future__ import annotations

import csv
import math
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss

from omlab.geodesic import BOUNDARY_SLACK, BallRegion, distances_from, metric_ball
from omlab.spaces import GRID, PATHS, MeasureSpec, MetricSpec

# one-sided 95% bound for zero successes in n trials ("rule of three")
_ZERO_HIT_FACTOR = 3.0


class ScheduleInfeasible(RuntimeError):
    """No radius of a schedule produced a resolvable mass."""


@dataclass(frozen=True)
class BallMassEstimate:
    mass: float
    std_error: float
    method: str
    sample_count: int
    radius: float
    center: int
    log_mass: float = float("nan")
    underflow: bool = False
    upper_bound: float | None = None
    seed: int | None = None
    hits: int = 0

    def __post_init__(self):
        if math.isnan(self.log_mass):
            object.__setattr__(
                self, "log_mass", math.log(self.mass) if self.mass > 0 else -math.inf
            )

    @property
    def log_std_error(self) -> float:
        if self.std_error == 0:
            return 0.0
        if self.mass <= 0:
            return math.inf
        return self.std_error / self.mass


@dataclass(frozen=True)
class RadiusSchedule:
    """Geometric radii ``r_j = r_max * ratio**j`` for ``j < count``.

    ``multipliers`` are the ball-scale factors ``C`` of ratio tests and
    ``outer`` the radius up to which continuity moduli must be valid.
    """

    r_max: float
    ratio: float = 0.8
    count: int = 8
    multipliers: tuple[float, ...] = ()
    outer: float | None = None

    def __post_init__(self):
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        if self.count < 2:
            raise ValueError("a schedule needs at least 2 radii")
        if any(not c > 0 for c in self.multipliers):
            raise ValueError("multipliers must be positive")
        if self.outer is not None and self.outer < self.r_max:
            raise ValueError("outer radius must be at least r_max")

    @property
    def radii(self) -> np.ndarray:
        return self.r_max * self.ratio ** np.arange(self.count)

    @property
    def scope(self) -> float:
        return self.outer if self.outer is not None else 10 * self.r_max


# ---------------------------------------------------------------------------
# Brownian path sampling


def _cholesky(times: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(np.minimum.outer(times, times))


@dataclass(eq=False)
class PathSampler:
    """Deterministic Brownian samples on a lattice, split into fixed partitions.

    Partition ``k`` draws from the ``k``-th child of ``SeedSequence(seed)``,
    and results are assembled in partition order, so every statistic is
    bit-identical whatever the worker count.
    """

    times: np.ndarray
    samples: int
    seed: int = 0
    partitions: int = 16
    workers: int = 1
    _chol: np.ndarray | None = field(default=None, repr=False)

    def _sizes(self) -> list[int]:
        q, rem = divmod(self.samples, self.partitions)
        return [q + (k < rem) for k in range(self.partitions)]

    def _draw(self, k: int, size: int) -> np.ndarray:
        if self._chol is None:
            self._chol = _cholesky(self.times)
        child = np.random.SeedSequence(self.seed).spawn(self.partitions)[k]
        z = np.random.default_rng(child).standard_normal((size, len(self.times)))
        return z @ self._chol.T

    def reduce(self, fn) -> list:
        """Apply ``fn(paths)`` to every partition; results in partition order."""
        sizes = self._sizes()
        jobs = [(k, n) for k, n in enumerate(sizes) if n > 0]

        def run(job):
            return fn(self._draw(*job))

        if self.workers == 1:
            return [run(j) for j in jobs]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(run, jobs))


_stats_cache: "weakref.WeakKeyDictionary[MeasureSpec, dict]" = weakref.WeakKeyDictionary()


def _path_statistics(measure: MeasureSpec, center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sup distances to ``center`` and tilt factors ``exp(-V)`` for every sample."""
    cache = _stats_cache.setdefault(measure, {})
    key = center.tobytes()
    if key in cache:
        return cache[key]
    sampler = PathSampler(
        measure.space.times, measure.samples, measure.seed, measure.partitions, measure.workers
    )
    tilt = measure.tilt

    def fn(paths):
        d = np.abs(paths - center).max(axis=1)
        w = np.exp(-tilt(paths)) if tilt is not None else np.ones(len(paths))
        return d, w

    parts = sampler.reduce(fn)
    out = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    cache[key] = out
    return out


def _mc_estimate(d, w, radius, scale, *, ball_radius, center, seed) -> BallMassEstimate:
    hits = d <= radius
    n = len(d)
    vals = np.where(hits, w, 0.0)
    if not hits.any():
        return BallMassEstimate(
            mass=0.0,
            std_error=0.0,
            method="monte-carlo",
            sample_count=n,
            radius=ball_radius,
            center=center,
            underflow=True,
            upper_bound=scale * _ZERO_HIT_FACTOR * float(w.max()) / n,
            seed=seed,
        )
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return BallMassEstimate(
        mass=scale * mean,
        std_error=scale * se,
        method="monte-carlo",
        sample_count=n,
        radius=ball_radius,
        center=center,
        seed=seed,
        hits=int(hits.sum()),
    )


def smallball_probability(
    steps: int,
    center,
    r: float,
    N: int,
    seed: int = 0,
    *,
    terminal_time: float = 1.0,
    partitions: int = 16,
    workers: int = 1,
) -> BallMassEstimate:
    """Monte Carlo ``P(max_i |W(t_i) - center(t_i)| <= r)`` for Brownian motion."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if N < 1000:
        raise ValueError("use at least 1000 samples")
    times = terminal_time * np.arange(1, steps + 1) / steps
    c = np.broadcast_to(np.asarray(center, dtype=float), times.shape)
    sampler = PathSampler(times, N, seed, partitions, workers)
    d = np.concatenate(sampler.reduce(lambda p: np.abs(p - c).max(axis=1)))
    return _mc_estimate(
        d, np.ones_like(d), r, 1.0, ball_radius=r, center=0, seed=seed
    )


def transfer_log_probability(
    times: np.ndarray,
    center: np.ndarray,
    r: float,
    terminal_tilt=None,
    nodes: int = 96,
) -> float:
    """``log E[exp(-V(W_T)); max_i |W(t_i) - center_i| <= r]`` by quadrature.

    The Brownian chain is propagated window by window with the Gaussian
    transition density; ``terminal_tilt`` is a vectorized ``V`` of the
    terminal value. Per-step renormalization keeps the result accurate for
    probabilities far below floating-point range.
    """
    x, w = leggauss(nodes)
    prev_nodes = np.zeros(1)
    prev = np.ones(1)
    t_prev = 0.0
    log_acc = 0.0
    for t, c in zip(times, center):
        dt = t - t_prev
        cur_nodes = c + r * x
        k = np.exp(-((cur_nodes[:, None] - prev_nodes[None, :]) ** 2) / (2 * dt))
        p = (k @ prev) * (r * w) / math.sqrt(2 * math.pi * dt)
        if t == times[-1] and terminal_tilt is not None:
            p = p * np.exp(-np.asarray(terminal_tilt(cur_nodes), dtype=float))
        s = float(p.sum())
        if s <= 0:
            return -math.inf
        log_acc += math.log(s)
        prev = p / s
        prev_nodes = cur_nodes
        t_prev = t
    return log_acc


def _transfer_estimate(measure: MeasureSpec, ball: BallRegion, radius: float) -> BallMassEstimate:
    space = measure.space
    center = space.points[ball.center]
    tilt = None
    if measure.tilt is not None:
        V = measure.tilt
        if V.expression is None or V.expression.names - {"wT"}:
            raise ValueError("transfer backend supports tilts of the terminal value wT only")
        tilt = lambda v: V.expression.evaluate({"wT": v})  # noqa: E731
    lp = transfer_log_probability(space.times, center, radius, tilt) + math.log(measure.scale)
    return BallMassEstimate(
        mass=math.exp(lp) if lp > -745 else 0.0,
        std_error=0.0,
        method="transfer",
        sample_count=0,
        radius=ball.radius,
        center=ball.center,
        log_mass=lp,
    )


# ---------------------------------------------------------------------------
# Public entry points


def ball_mass(measure: MeasureSpec, ball: BallRegion) -> BallMassEstimate:
    if ball.space is not measure.space:
        raise ValueError("ball and measure live on different spaces")
    space = measure.space
    if space.kind == PATHS:
        if measure.path_method == "transfer":
            return _transfer_estimate(measure, ball, ball.base_radius)
        d, w = _path_statistics(measure, space.points[ball.center])
        return _mc_estimate(
            d,
            w,
            ball.base_radius,
            measure.scale,
            ball_radius=ball.radius,
            center=ball.center,
            seed=measure.seed,
        )
    weights = measure.point_weights()
    method = "quadrature" if space.kind == GRID else "atom-sum"
    return BallMassEstimate(
        mass=float(weights[ball.members].sum()),
        std_error=0.0,
        method=method,
        sample_count=len(ball.members),
        radius=ball.radius,
        center=ball.center,
    )


def ball_masses(
    measure: MeasureSpec, metric: MetricSpec, x, radii: Sequence[float]
) -> list[BallMassEstimate]:
    """Masses of ``B(r, x)`` for several radii from one distance sweep."""
    space = measure.space
    if metric.space is not space:
        raise ValueError("metric and measure live on different spaces")
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 0):
        raise ValueError("radii must be positive")
    if space.kind == PATHS:
        return [ball_mass(measure, metric_ball(space, metric, x, float(r))) for r in radii]
    xi = space.locate(x)
    d = distances_from(metric, xi, limit=float(radii.max()))
    order = np.argsort(d, kind="stable")
    ds = d[order]
    cum = np.cumsum(measure.point_weights()[order])
    counts = np.searchsorted(ds, radii * (1 + BOUNDARY_SLACK), side="right")
    method = "quadrature" if space.kind == GRID else "atom-sum"
    return [
        BallMassEstimate(
            mass=float(cum[k - 1]) if k > 0 else 0.0,
            std_error=0.0,
            method=method,
            sample_count=int(k),
            radius=float(r),
            center=xi,
        )
        for r, k in zip(radii, counts)
    ]


CSV_COLUMNS = ("center", "radius", "mass", "std_error", "method", "samples", "seed")


def write_mass_csv(rows: Sequence[BallMassEstimate], path: str | Path, digest: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if digest:
            fh.write(f"# config_digest={digest}\n")
        w.writerow(CSV_COLUMNS)
        for e in rows:
            w.writerow(
                [
                    e.center,
                    repr(e.radius),
                    repr(e.mass),
                    repr(e.std_error),
                    e.method,
                    e.sample_count,
                    "" if e.seed is None else e.seed,
                ]
            )

