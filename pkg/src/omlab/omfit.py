"""Small-radius limits of ball-mass data.

* :func:`om_difference` extrapolates ``log mu(B(r,x)) / mu(B(r,y))`` to
  ``r -> 0``, giving ``OM(y) - OM(x)``;
* :func:`fit_local_dimension` extrapolates ``mu(B(Cr,q)) / mu(B(r,q))`` and
  regresses on ``log C`` to get the local dimension ``p``;
* :func:`fit_small_ball` finds ``alpha`` making ``r^alpha log mu(B(r,q))``
  flat, and the constant it levels off at.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from omlab.ballmass import (
    BallMassEstimate,
    RadiusSchedule,
    ScheduleInfeasible,
    ball_masses,
)
from omlab.spaces import MeasureSpec, MetricSpec

DIVERGENCE_THRESHOLD = 20.0
# Monte Carlo masses below this many expected hits are treated as unresolved.
MC_FLOOR_HITS = 10


@dataclass(frozen=True)
class LinearFit:
    intercept: float
    slope: float
    intercept_se: float
    residual: float
    model_shift: float = 0.0

    @property
    def intercept_error(self) -> float:
        """Statistical error combined with extrapolation-model sensitivity."""
        return math.hypot(self.intercept_se, self.model_shift)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intercept_error"] = self.intercept_error
        return d


def _wls(X, y, sw):
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    return coef


def fit_linear(r, values, std_errors=None) -> LinearFit:
    """Weighted least squares ``values ~ a + b r``.

    Weights are ``1 / std_error**2`` when every point has a positive standard
    error, otherwise uniform. The intercept standard error comes from the
    weights when they are known and from the residual scatter when they are
    not. ``model_shift`` is how far the intercept moves when a quadratic term
    is added (needs at least 4 points): a bias gauge that residual scatter
    cannot see on deterministic data.
    """
    r = np.asarray(r, dtype=float)
    y = np.asarray(values, dtype=float)
    n = len(r)
    if n < 2:
        raise ValueError("need at least 2 points for a linear fit")
    X = np.stack([np.ones(n), r], axis=1)
    se = None if std_errors is None else np.asarray(std_errors, dtype=float)
    known = se is not None and np.all(se > 0)
    sw = 1.0 / se if known else np.ones(n)
    coef = _wls(X, y, sw)
    resid = y - X @ coef
    rms = float(np.sqrt(np.mean(resid**2)))
    cov = np.linalg.pinv((X * sw[:, None]).T @ (X * sw[:, None]))
    if known:
        a_se = math.sqrt(cov[0, 0])
    elif n > 2:
        a_se = math.sqrt(cov[0, 0] * float(resid @ resid) / (n - 2))
    else:
        a_se = 0.0
    shift = 0.0
    if n >= 4:
        quad = _wls(np.stack([np.ones(n), r, r**2], axis=1), y, sw)
        shift = abs(float(quad[0] - coef[0]))
    return LinearFit(float(coef[0]), float(coef[1]), a_se, rms, shift)


@dataclass
class OMDifferenceEstimate:
    """Estimate of ``OM(y) - OM(x)``; ``value`` is infinite iff diverged."""

    x: int
    y: int
    value: float
    per_radius: list[tuple[float, float, float]]
    fit: LinearFit | None
    diverged: str = "none"
    dropped_radii: list[float] = field(default_factory=list)

    @property
    def error(self) -> float:
        return self.fit.intercept_error if self.fit is not None else math.inf

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "value": self.value,
            "diverged": self.diverged,
            "fit": self.fit.to_dict() if self.fit else None,
            "per_radius": [
                {"r": r, "log_ratio": lr, "std_error": se} for r, lr, se in self.per_radius
            ],
            "dropped_radii": self.dropped_radii,
        }


def _resolved(e: BallMassEstimate) -> bool:
    if e.underflow or not math.isfinite(e.log_mass):
        return False
    if e.method == "monte-carlo":
        return e.hits >= MC_FLOOR_HITS
    return True


def _check_space(measure: MeasureSpec, metric: MetricSpec) -> None:
    if measure.space is not metric.space:
        raise ValueError("measure and metric live on different spaces")


def divergence_direction(log_ratios: Sequence[float], threshold: float = DIVERGENCE_THRESHOLD) -> str:
    """``'+inf'``/``'-inf'`` if the last three log-ratios (smallest radii) exceed
    ``threshold`` in magnitude with one sign and grow monotonically."""
    tail = np.asarray(log_ratios[-3:], dtype=float)
    if len(tail) < 3 or not np.all(np.abs(tail) > threshold):
        return "none"
    sign = np.sign(tail)
    if not np.all(sign == sign[0]):
        return "none"
    if not np.all(np.diff(np.abs(tail)) > 0):
        return "none"
    return "+inf" if sign[0] > 0 else "-inf"


def om_difference(
    measure: MeasureSpec,
    metric: MetricSpec,
    x,
    y,
    schedule: RadiusSchedule,
    *,
    divergence_threshold: float = DIVERGENCE_THRESHOLD,
) -> OMDifferenceEstimate:
    """Estimate ``OM(y) - OM(x)`` from the ratio of ball masses around ``x`` and ``y``."""
    _check_space(measure, metric)
    space = measure.space
    xi, yi = space.locate(x), space.locate(y)
    radii = schedule.radii
    mx = ball_masses(measure, metric, xi, radii)
    my = mx if xi == yi else ball_masses(measure, metric, yi, radii)

    rows, dropped = [], []
    for r, a, b in zip(radii, mx, my):
        if not (_resolved(a) and _resolved(b)):
            dropped.append(float(r))
            continue
        lr = a.log_mass - b.log_mass
        se = math.hypot(a.log_std_error, b.log_std_error)
        rows.append((float(r), float(lr), float(se)))
    if not rows:
        raise ScheduleInfeasible(
            f"schedule infeasible: no resolvable mass at radii {radii.tolist()}"
        )
    rr, lr, se = (np.array(c) for c in zip(*rows))
    direction = divergence_direction(lr, divergence_threshold)
    if len(rows) < 2:
        return OMDifferenceEstimate(xi, yi, float(lr[0]), rows, None, direction, dropped)
    fit = fit_linear(rr, lr, se)
    value = fit.intercept
    if direction != "none":
        value = math.inf if direction == "+inf" else -math.inf
    return OMDifferenceEstimate(xi, yi, value, rows, fit, direction, dropped)


@dataclass
class DimensionFit:
    anchor: int
    p: float
    per_C: list[tuple[float, float]]
    residual: float
    fits: dict[float, LinearFit] = field(default_factory=dict)

    def ratio(self, C: float) -> float:
        for c, v in self.per_C:
            if c == C:
                return v
        raise KeyError(C)

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor,
            "p": self.p,
            "residual": self.residual,
            "per_C": [{"C": c, "ratio": v} for c, v in self.per_C],
        }


def fit_local_dimension(
    measure: MeasureSpec,
    metric: MetricSpec,
    q,
    schedule: RadiusSchedule,
) -> DimensionFit:
    """Fit ``p`` in ``mu(B(Cr,q)) / mu(B(r,q)) -> C^p``."""
    _check_space(measure, metric)
    Cs = [float(c) for c in schedule.multipliers if c != 1]
    if len(Cs) < 2:
        raise ValueError("need at least 2 multipliers different from 1")
    qi = measure.space.locate(q)
    radii = schedule.radii
    all_r = np.unique(np.concatenate([radii] + [c * radii for c in Cs]))
    table = {e.radius: e for e in ball_masses(measure, metric, qi, all_r)}
    base = [table[r] for r in radii]

    per_C: list[tuple[float, float]] = [(1.0, 1.0)]
    fits, logs = {}, []
    for C in Cs:
        rows = []
        for r, b in zip(radii, base):
            a = table[C * r]
            if not (_resolved(a) and _resolved(b)) or a.mass <= 0 or b.mass <= 0:
                continue
            rows.append((r, a.log_mass - b.log_mass, math.hypot(a.log_std_error, b.log_std_error)))
        if len(rows) < 2:
            raise ValueError(f"non-positive ball masses for multiplier C={C}; schedule too small")
        rr, lr, se = (np.array(c) for c in zip(*rows))
        fit = fit_linear(rr, lr, se)
        fits[C] = fit
        logs.append(fit.intercept)
        per_C.append((C, math.exp(fit.intercept)))
    lc = np.log(Cs)
    la = np.array(logs)
    p = float(lc @ la / (lc @ lc))
    residual = float(np.sqrt(np.mean((la - p * lc) ** 2)))
    return DimensionFit(qi, p, sorted(per_C), residual, fits)


@dataclass
class SmallBallFit:
    """``r^alpha log mu(B(r,q)) -> -C_const`` fitted on ``window``.

    ``residual`` is the normalized leftover slope of ``r^alpha log mu`` over
    the window, ``spread`` its relative range; ``alpha_interval`` collects
    the grid exponents whose slope is within two standard errors of flat.
    """

    anchor: int
    alpha: float
    C_const: float
    window: tuple[float, float]
    residual: float
    spread: float
    detected: bool
    alpha_interval: tuple[float, float]
    radii: list[float]
    log_masses: list[float]

    @property
    def verdict(self) -> str:
        return "law detected" if self.detected else "law not detected"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict
        return d


MassSource = Callable[[np.ndarray], Sequence[BallMassEstimate]]


def mass_source(measure: MeasureSpec, metric: MetricSpec, q) -> MassSource:
    """Adapter turning a measure/metric pair into a ``radii -> masses`` source."""
    _check_space(measure, metric)
    return lambda radii: ball_masses(measure, metric, q, radii)


def synthetic_source(log_mass: Callable[[np.ndarray], np.ndarray]) -> MassSource:
    """Mass source from a closed-form ``log mass(r)``."""

    def source(radii):
        lm = np.asarray(log_mass(np.asarray(radii, dtype=float)), dtype=float)
        return [
            BallMassEstimate(
                mass=math.exp(v) if v > -745 else 0.0,
                std_error=0.0,
                method="synthetic",
                sample_count=0,
                radius=float(r),
                center=0,
                log_mass=float(v),
            )
            for r, v in zip(radii, lm)
        ]

    return source


def _flatness(r, lm, se, alpha):
    g = r**alpha * lm
    w = None if se is None else 1.0 / np.maximum(r**alpha * se, 1e-300)
    X = np.stack([np.ones_like(r), r], axis=1)
    sw = np.ones_like(r) if w is None else w
    coef, *_ = np.linalg.lstsq(X * sw[:, None], g * sw, rcond=None)
    slope = float(coef[1])
    if se is None:
        slope_se = 0.0
    else:
        cov = np.linalg.pinv((X * sw[:, None]).T @ (X * sw[:, None]))
        slope_se = math.sqrt(cov[1, 1])
    return g, slope, slope_se


def fit_small_ball(
    source: MassSource,
    q: int = 0,
    alpha_grid: Sequence[float] | None = None,
    window: tuple[float, float] = (0.25, 1.0),
    *,
    count: int = 10,
    spread_tol: float = 0.25,
) -> SmallBallFit:
    """Detect ``lim r^alpha log mu(B(r,q)) = -C`` inside ``window``.

    Radii with unresolved Monte Carlo masses are dropped (they cap the
    effective window from below). The exponent is the grid value with the
    flattest ``r^alpha log mu``, refined to the zero crossing of the slope.
    """
    r_lo, r_hi = window
    if not 0 < r_lo < r_hi:
        raise ValueError("window must satisfy 0 < r_lo < r_hi")
    grid = np.asarray(
        alpha_grid if alpha_grid is not None else np.round(np.arange(0.05, 4.0001, 0.05), 10),
        dtype=float,
    )
    if grid.size == 0 or np.any(grid <= 0):
        raise ValueError("alpha grid must hold positive exponents")
    radii = np.geomspace(r_lo, r_hi, count)
    est = source(radii)
    keep = [e for e in est if _resolved(e)]
    if len(keep) < 5:
        raise ScheduleInfeasible(
            f"only {len(keep)} resolvable radii in window {window}; need at least 5"
        )
    r = np.array([e.radius for e in keep])
    lm = np.array([e.log_mass for e in keep])
    if np.any(lm >= 0):
        raise ValueError("ball masses must lie strictly below 1 for a small-ball fit")
    se_arr = np.array([e.log_std_error for e in keep])
    se = se_arr if np.all(se_arr > 0) else None
    span = r.max() - r.min()

    def norm_slope(a):
        g, s, _ = _flatness(r, lm, se, a)
        return s * span / abs(g.mean())

    slopes = np.array([norm_slope(a) for a in grid])
    k = int(np.argmin(np.abs(slopes)))
    alpha = float(grid[k])
    for j in (k - 1, k):
        if 0 <= j < len(grid) - 1 and slopes[j] * slopes[j + 1] < 0:
            alpha = float(brentq(norm_slope, grid[j], grid[j + 1], xtol=1e-12))
            break
    g, slope, slope_se = _flatness(r, lm, se, alpha)
    residual = abs(slope) * span / abs(g.mean())
    spread = float(np.ptp(g) / abs(g.mean()))
    order = np.argsort(r)
    C_const = float(-np.mean(g[order[:2]]))

    interval = (alpha, alpha)
    if se is not None:
        scan = np.arange(max(alpha - 1.0, 1e-3), alpha + 1.0, 0.002)
        z = []
        for a in scan:
            _, s_a, s_se = _flatness(r, lm, se, a)
            z.append(abs(s_a) <= 2 * s_se)
        ok = scan[np.array(z)]
        if ok.size:
            interval = (float(min(ok.min(), alpha)), float(max(ok.max(), alpha)))
    detected = bool(g.mean() < 0 and C_const > 0 and spread <= spread_tol)
    return SmallBallFit(
        anchor=int(q) if isinstance(q, (int, np.integer)) else 0,
        alpha=alpha,
        C_const=C_const,
        window=(float(r.min()), float(r.max())),
        residual=float(residual),
        spread=spread,
        detected=detected,
        alpha_interval=interval,
        radii=r.tolist(),
        log_masses=lm.tolist(),
    )


@dataclass
class AnchorReport:
    agree: bool
    first: DimensionFit | SmallBallFit
    second: DimensionFit | SmallBallFit
    gap: float

    def to_dict(self) -> dict:
        return {
            "agree": self.agree,
            "gap": self.gap,
            "first": self.first.to_dict(),
            "second": self.second.to_dict(),
        }


def anchor_independence(
    fit_op: Callable[[object], DimensionFit | SmallBallFit],
    q1,
    q2,
    tol: float = 0.05,
) -> AnchorReport:
    """Run ``fit_op`` at two anchors and compare the fitted exponents.

    Dimension fits agree when ``|p1 - p2| <= max(tol, residual1 + residual2)``;
    small-ball fits agree when their alpha intervals overlap (widened by
    ``tol``) and both detect the law.
    """
    a, b = fit_op(q1), fit_op(q2)
    if isinstance(a, DimensionFit):
        gap = abs(a.p - b.p)
        return AnchorReport(gap <= max(tol, a.residual + b.residual), a, b, gap)
    gap = abs(a.alpha - b.alpha)
    lo = max(a.alpha_interval[0], b.alpha_interval[0])
    hi = min(a.alpha_interval[1], b.alpha_interval[1])
    overlap = lo <= hi + tol
    return AnchorReport(bool(overlap and a.detected and b.detected), a, b, gap)

