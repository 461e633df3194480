"""Harnesses comparing estimated OM differences with closed-form predictions.

Predictions use ``OM = OM0 - p U + V`` for the reweighted space
``(X, exp(-U) d0, exp(-V) mu0)``; a constant ``U`` leaves ``OM0 + V``.
For the Brownian lattice, conformal reweighting by a nonconstant ``U``
instead makes log mass ratios blow up as ``r -> 0``; the probe measures that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from omlab.ballmass import RadiusSchedule
from omlab.omfit import (
    DIVERGENCE_THRESHOLD,
    SmallBallFit,
    divergence_direction,
    fit_local_dimension,
    om_difference,
)
from omlab.spaces import (
    ATOMS,
    GRID,
    PATHS,
    MeasureSpec,
    MetricSpec,
    SampledSpace,
    ScalarField,
    as_field,
    cameron_martin_energy,
    field_from_expression,
    field_from_values,
    measure as make_measure,
    metric as make_metric,
)

GRID_TOLERANCE = 0.1
MC_TOLERANCE = 0.15
RATE_TOLERANCE = 0.3


def _value(f, space: SampledSpace, coords: np.ndarray) -> float:
    if f is None:
        return 0.0
    if isinstance(f, (int, float, np.floating)):
        return float(f)
    if isinstance(f, ScalarField):
        return float(f(coords[None, :])[0])
    return float(np.asarray(f(coords[None, :])).reshape(-1)[0])


def predict_om_delta(OM0, U, V, p: float, x, y, space: SampledSpace | None = None) -> float:
    """``[OM0 - p U + V](y) - [OM0 - p U + V](x)``.

    Fields may be :class:`ScalarField`, numbers, vectorized callables or
    ``None`` (zero). ``x`` and ``y`` are coordinates, or point references
    resolved through ``space``.
    """
    if space is not None:
        x, y = space.coords(x), space.coords(y)
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)

    def total(z):
        return _value(OM0, space, z) - p * _value(U, space, z) + _value(V, space, z)

    if np.array_equal(x, y):
        return 0.0
    return total(y) - total(x)


def base_om(space: SampledSpace) -> Callable[[np.ndarray], np.ndarray]:
    """Closed-form OM functional of the base measure.

    Lebesgue cells: 0. Atoms: minus the log atom mass. Brownian lattice:
    half the squared Cameron-Martin norm of the (piecewise-linear) path.
    """
    if space.kind == GRID:
        return lambda pts: np.zeros(np.atleast_2d(pts).shape[0])
    if space.kind == ATOMS:
        logm = np.log(space.cell_volumes)
        return lambda pts: -logm[[space.locate(p) for p in np.atleast_2d(pts)]]
    return lambda pts: np.array(
        [cameron_martin_energy(p, space.times) for p in np.atleast_2d(pts)]
    )


@dataclass
class PairResult:
    x: list[float]
    y: list[float]
    empirical: float
    predicted: float
    gap: float
    error: float


@dataclass
class TransformReport:
    case: str
    pairs: list[PairResult]
    max_gap: float
    tolerance: float
    passed: bool
    notes: list[str] = field(default_factory=list)
    config_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "pass": self.passed,
            "max_gap": self.max_gap,
            "tolerance": self.tolerance,
            "notes": self.notes,
            "config_digest": self.config_digest,
            "pairs": [vars(p) for p in self.pairs],
        }

    def to_text(self) -> str:
        lines = [f"case {self.case}: {'PASS' if self.passed else 'FAIL'}"
                 f" (max gap {self.max_gap:.4g}, tolerance {self.tolerance:g})"]
        lines.append(f"{'x':>24} {'y':>24} {'empirical':>11} {'predicted':>11} {'gap':>9}")
        for p in self.pairs:
            lines.append(
                f"{_fmt(p.x):>24} {_fmt(p.y):>24} {p.empirical:11.5f} {p.predicted:11.5f} {p.gap:9.5f}"
            )
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def _fmt(v: list[float]) -> str:
    if len(v) > 3:
        return f"path[{len(v)}] end={v[-1]:.3g}"
    return "(" + ", ".join(f"{c:.3g}" for c in v) + ")"


def compare_pairs(
    case: str,
    mu: MeasureSpec,
    d: MetricSpec,
    pairs: Sequence[tuple],
    schedule: RadiusSchedule,
    predict: Callable[[np.ndarray, np.ndarray], float],
    tolerance: float,
) -> TransformReport:
    """Estimate OM differences on ``pairs`` and compare with ``predict(x, y)``."""
    space = mu.space
    rows = []
    for x, y in pairs:
        xc, yc = space.coords(x), space.coords(y)
        est = om_difference(mu, d, x, y, schedule)
        pred = float(predict(xc, yc))
        rows.append(
            PairResult(
                xc.tolist(), yc.tolist(), float(est.value), pred,
                float(abs(est.value - pred)), float(est.error),
            )
        )
    max_gap = max((r.gap for r in rows), default=0.0)
    return TransformReport(case, rows, max_gap, tolerance, bool(max_gap <= tolerance))


def _default_tolerance(space: SampledSpace, measure_kwargs: dict) -> float:
    if space.kind == PATHS and measure_kwargs.get("method") != "transfer":
        return MC_TOLERANCE
    return GRID_TOLERANCE


def verify_fixed_metric(space, V, pairs, schedule, tolerance=None, **measure_kwargs) -> TransformReport:
    """Same metric, tilted measure: ``OM = OM0 + V``."""
    V = as_field(space, V)
    om0 = base_om(space)
    tol = tolerance if tolerance is not None else _default_tolerance(space, measure_kwargs)
    return compare_pairs(
        "fixed-metric",
        make_measure(space, V, **measure_kwargs),
        make_metric(space),
        pairs,
        schedule,
        lambda x, y: predict_om_delta(om0, None, V, 0.0, x, y),
        tol,
    )


def verify_part_a(space, c: float, V, pairs, schedule, tolerance=None, **measure_kwargs) -> TransformReport:
    """Constant conformal weight ``U = c``: OM differences must stay ``OM0 + V``."""
    V = as_field(space, V)
    om0 = base_om(space)
    tol = tolerance if tolerance is not None else _default_tolerance(space, measure_kwargs)
    return compare_pairs(
        "part-a",
        make_measure(space, V, **measure_kwargs),
        make_metric(space, float(c)),
        pairs,
        schedule,
        lambda x, y: predict_om_delta(om0, None, V, 0.0, x, y),
        tol,
    )


def verify_part_b(
    space,
    U,
    V,
    p: float,
    pairs,
    schedule,
    tolerance=None,
    *,
    dimension_schedule: RadiusSchedule | None = None,
    **measure_kwargs,
) -> TransformReport:
    """Nonconstant conformal weight on a space of local dimension ``p``.

    The local dimension of the base measure is fitted first at the first
    pair's ``x``; a mismatch above 0.1 fails the report as an unmet
    precondition.
    """
    U = as_field(space, U)
    V = as_field(space, V)
    om0 = base_om(space)
    tol = tolerance if tolerance is not None else _default_tolerance(space, measure_kwargs)
    dim_sched = dimension_schedule or RadiusSchedule(
        schedule.r_max, schedule.ratio, min(schedule.count, 6), multipliers=(1.5, 2.0, 2.5)
    )
    dim = fit_local_dimension(
        make_measure(space, None, **measure_kwargs), make_metric(space), pairs[0][0], dim_sched
    )
    report = compare_pairs(
        "part-b",
        make_measure(space, V, **measure_kwargs),
        make_metric(space, U),
        pairs,
        schedule,
        lambda x, y: predict_om_delta(om0, U, V, p, x, y),
        tol,
    )
    report.notes.append(f"fitted local dimension of mu0: {dim.p:.4f} (assumed p={p:g})")
    if abs(dim.p - p) > 0.1:
        report.notes.append("precondition not met: fitted dimension differs from p by more than 0.1")
        report.passed = False
    return report


def _scaled_field(f: ScalarField, g: ScalarField | None, n: float) -> ScalarField:
    """``(f - g) / n`` keeping expressions symbolic when possible."""
    if f.expression is not None and (g is None or g.expression is not None):
        src = f"({f.expression.source})" if g is None else f"(({f.expression.source}) - ({g.expression.source}))"
        return field_from_expression(f.space, f"{src} / ({float(n)!r})")
    vals = f.values if g is None else f.values - g.values
    return field_from_values(f.space, vals / n)


def uniformize(f: ScalarField, n: int) -> MetricSpec:
    """Conformal metric ``exp(-f/n) d0`` making the OM functional of
    ``(X, d, exp(-f) dx)`` constant."""
    if n <= 0:
        raise ValueError("dimension must be positive")
    return make_metric(f.space, _scaled_field(f, None, n))


def target_metric_for_om(f: ScalarField, h, n: int) -> MetricSpec:
    """Conformal metric ``exp(-(f - h)/n) d0`` giving ``OM = h`` up to a constant."""
    if n <= 0:
        raise ValueError("dimension must be positive")
    h = as_field(f.space, h)
    if h is not None and h.expression is not None and h.expression.is_constant and h.constant_value == 0:
        h = None
    return make_metric(f.space, _scaled_field(f, h, n))


def verify_uniformizer(space, f, pairs, schedule, tolerance=GRID_TOLERANCE, *, sign: float = 1.0) -> TransformReport:
    """OM differences on ``(X, exp(-sign f/n) d0, exp(-f) dx)`` against zero.

    ``sign=-1`` reproduces the opposite-sign metric ``exp(+f/n) d0``, which
    should fail this check.
    """
    f = as_field(space, f)
    d = uniformize(f, space.dim)
    if sign != 1.0:
        d = make_metric(space, _scaled_field(f, None, space.dim / sign))
    report = compare_pairs(
        "uniformize", make_measure(space, f), d, pairs, schedule, lambda x, y: 0.0, tolerance
    )
    report.notes.append(f"conformal weight U = {sign:+g} f/{space.dim}")
    return report


def verify_target_om(space, f, h, pairs, schedule, tolerance=0.15) -> TransformReport:
    f = as_field(space, f)
    h = as_field(space, h)
    d = target_metric_for_om(f, h, space.dim)
    return compare_pairs(
        "target-om",
        make_measure(space, f),
        d,
        pairs,
        schedule,
        lambda x, y: predict_om_delta(h, None, None, 0.0, x, y),
        tolerance,
    )


@dataclass
class DivergenceReport:
    x: int
    y: int
    Ux: float
    Uy: float
    radii: list[float]
    log_ratios: list[float]
    rate_exponent: float
    alpha: float
    predicted_amplitude: float
    fitted_amplitude: float
    direction: str
    diverged: bool
    passed: bool
    config_digest: str = ""

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["pass"] = d.pop("passed")
        return d


def analyze_divergence(
    radii,
    log_ratios,
    Ux: float,
    Uy: float,
    smallball: SmallBallFit,
    *,
    x: int = 0,
    y: int = 1,
    threshold: float = DIVERGENCE_THRESHOLD,
) -> DivergenceReport:
    """Judge a log-ratio sequence (radii decreasing) against the small-ball law.

    The rate exponent is the log-log slope of ``|log ratio|`` against ``r``;
    the predicted amplitude is ``C |exp(-alpha Uy) - exp(-alpha Ux)|``.
    """
    r = np.asarray(radii, dtype=float)
    L = np.asarray(log_ratios, dtype=float)
    direction = divergence_direction(L, threshold)
    usable = np.abs(L) > 1.0
    if usable.sum() >= 2:
        slope, intercept = np.polyfit(np.log(r[usable]), np.log(np.abs(L[usable])), 1)
        rate, amp = float(-slope), float(math.exp(intercept))
    else:
        rate, amp = 0.0, 0.0
    a, C = smallball.alpha, smallball.C_const
    predicted = C * abs(math.exp(-a * Uy) - math.exp(-a * Ux))
    diverged = direction != "none"
    ok_rate = abs(rate - a) <= RATE_TOLERANCE * a
    label = {"+inf": "to-infinity", "-inf": "to-zero", "none": "none"}[direction]
    return DivergenceReport(
        x, y, float(Ux), float(Uy), r.tolist(), L.tolist(), rate, float(a),
        float(predicted), amp, label, diverged, bool(diverged and ok_rate),
    )


def divergence_probe_c(
    space: SampledSpace,
    U,
    x,
    y,
    schedule: RadiusSchedule,
    smallball: SmallBallFit,
    mu0: MeasureSpec | None = None,
    *,
    threshold: float = DIVERGENCE_THRESHOLD,
) -> DivergenceReport:
    """Log mass ratios under ``exp(-U) d0`` for a path lattice with a small-ball law.

    Conformal balls are base balls of radius ``r exp(U(center))``. ``mu0``
    defaults to the deterministic transfer backend, since the interesting
    radii lie far below Monte Carlo resolution.
    """
    if space.kind != PATHS:
        raise ValueError("the divergence probe needs a path lattice")
    U = as_field(space, U)
    mu = mu0 or make_measure(space, method="transfer")
    xi, yi = space.locate(x), space.locate(y)
    Ux, Uy = U.at(xi), U.at(yi)
    if Ux == Uy:
        raise ValueError("probe needs U(x) != U(y)")
    est = om_difference(mu, make_metric(space, U), xi, yi, schedule, divergence_threshold=threshold)
    r = [row[0] for row in est.per_radius]
    L = [row[1] for row in est.per_radius]
    return analyze_divergence(r, L, Ux, Uy, smallball, x=xi, y=yi, threshold=threshold)


def synthetic_divergence(
    log_mass: Callable[[np.ndarray], np.ndarray],
    radii,
    Ux: float,
    Uy: float,
    smallball: SmallBallFit,
    *,
    threshold: float = DIVERGENCE_THRESHOLD,
) -> DivergenceReport:
    """Divergence probe on a base measure given by ``log_mass(s) = log mu0(B0(s))``.

    Conformal balls around a point with weight ``u`` are base balls of
    radius ``r exp(u)``, so no sampling is involved and the log-ratios are
    exact up to rounding.
    """
    r = np.asarray(radii, dtype=float)
    L = np.asarray(log_mass(r * math.exp(Ux)), dtype=float) - np.asarray(
        log_mass(r * math.exp(Uy)), dtype=float
    )
    return analyze_divergence(r, L, Ux, Uy, smallball, threshold=threshold)


@dataclass
class RigidityReport:
    status: str
    constant_values: dict[str, list[float]] = field(default_factory=dict)
    constant_errors: dict[str, list[float]] = field(default_factory=dict)
    constants_agree: bool | None = None
    divergence: dict[str, list[DivergenceReport]] = field(default_factory=dict)
    passed: bool = False
    config_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "pass": self.passed,
            "constant_values": self.constant_values,
            "constant_errors": self.constant_errors,
            "constants_agree": self.constants_agree,
            "divergence": {k: [d.to_dict() for d in v] for k, v in self.divergence.items()},
            "config_digest": self.config_digest,
        }


def rigidity_check(
    space: SampledSpace,
    U1,
    U2,
    mu0: MeasureSpec,
    pairs,
    schedule: RadiusSchedule,
    smallball: SmallBallFit | None = None,
    *,
    probe_measure: MeasureSpec | None = None,
) -> RigidityReport:
    """Conformal changes on a space with a small-ball law either keep OM or break it.

    Constant weights must reproduce the same OM differences (within twice
    the combined fit error); nonconstant weights must make the probe diverge
    on every pair where the weight differs.
    """
    if space.kind != PATHS or smallball is None or not smallball.detected:
        return RigidityReport(status="precondition not met")
    report = RigidityReport(status="ok")
    fields = {"U1": as_field(space, U1), "U2": as_field(space, U2)}
    ok = True
    for name, U in fields.items():
        if U is None or U.is_constant:
            c = 0.0 if U is None else U.constant_value
            vals, errs = [], []
            for x, y in pairs:
                e = om_difference(mu0, make_metric(space, c), x, y, schedule)
                vals.append(float(e.value))
                errs.append(float(e.error))
            report.constant_values[name] = vals
            report.constant_errors[name] = errs
        else:
            probes = []
            for x, y in pairs:
                if U.at(x) == U.at(y):
                    continue
                probes.append(
                    divergence_probe_c(space, U, x, y, schedule, smallball, probe_measure)
                )
            report.divergence[name] = probes
            ok &= bool(probes) and all(p.diverged for p in probes)
    if len(report.constant_values) == 2:
        (v1, e1), (v2, e2) = (
            (report.constant_values[k], report.constant_errors[k]) for k in ("U1", "U2")
        )
        agree = all(abs(a - b) <= 2 * math.hypot(ea, eb) for a, b, ea, eb in zip(v1, v2, e1, e2))
        report.constants_agree = agree
        ok &= agree
    report.passed = bool(ok)
    return report
