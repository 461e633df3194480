import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omlab.ballmass import RadiusSchedule
from omlab.omfit import fit_small_ball, synthetic_source
from omlab.spaces import build_atoms, build_grid, build_path_lattice, field_from_expression, measure
from omlab.verify import (
    analyze_divergence,
    base_om,
    divergence_probe_c,
    predict_om_delta,
    rigidity_check,
    synthetic_divergence,
    target_metric_for_om,
    uniformize,
    verify_fixed_metric,
    verify_part_a,
    verify_part_b,
    verify_target_om,
    verify_uniformizer,
)

LINE_PAIRS = [([0.0], [1.0]), ([0.0], [0.5]), ([0.5], [1.0])]
SCHED = RadiusSchedule(0.2, 0.8, 8)


def sin_u(z):
    return 0.3 * np.sin(np.atleast_2d(z)[:, 0])


def bowl(z):
    return 0.5 * np.sum(np.atleast_2d(z) ** 2, axis=1)


def test_predict_arithmetic_oracle():
    d = predict_om_delta(0.0, sin_u, bowl, 2, [0, 0], [1, 0])
    assert d == pytest.approx(-0.6 * math.sin(1) + 0.5, abs=1e-15)
    assert d == pytest.approx(-0.00488, abs=5e-6)


def test_predict_reduces_without_weight():
    assert predict_om_delta(0.0, None, bowl, 2, [0, 0], [1, 1]) == pytest.approx(1.0)
    assert predict_om_delta(0.0, sin_u, bowl, 2, [0.3, 0.1], [0.3, 0.1]) == 0.0


@settings(max_examples=50)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-100, 100), st.floats(0, 3))
def test_predict_gauge_invariance(a, b, c, p):
    x, y = [0.2, -0.4], [1.1, 0.7]
    ref = predict_om_delta(bowl, sin_u, bowl, p, x, y)
    shifted = predict_om_delta(
        lambda z: bowl(z) + a, lambda z: sin_u(z) + b, lambda z: bowl(z) + c, p, x, y
    )
    assert shifted == pytest.approx(ref, abs=1e-9 * (1 + abs(a) + abs(b) * p + abs(c)))


def test_base_om_kinds():
    assert base_om(build_grid([0], [1], 3))(np.zeros((2, 1))).tolist() == [0, 0]
    atoms = build_atoms([0.0, 1.0], [0.2, 0.1])
    assert base_om(atoms)(atoms.points)[1] == pytest.approx(-math.log(0.1))
    lat = build_path_lattice(64, 1.0, ["0.5*t"])
    assert base_om(lat)(lat.points)[0] == pytest.approx(0.125)


def test_part_a_gaussian_c0(gaussian_line):
    rep = verify_part_a(gaussian_line, 0.0, "x1^2/2", LINE_PAIRS, SCHED)
    assert rep.passed and rep.max_gap <= 0.05


def test_part_a_homogeneous_measure():
    s = build_grid([-2], [2], 4001)
    rep = verify_part_a(s, math.log(2), None, LINE_PAIRS, SCHED)
    assert rep.passed
    assert all(abs(p.empirical) < 1e-9 for p in rep.pairs)


def test_part_a_atoms_log_mass_ratio():
    s = build_atoms([0.0, 1.0, 3.0], [0.5, 0.2, 0.3], ["a", "b", "c"])
    rep = verify_part_a(s, 1.0, None, [("a", "b"), ("b", "c")], RadiusSchedule(0.3, 0.5, 4))
    assert rep.pairs[0].empirical == pytest.approx(math.log(0.5 / 0.2), abs=1e-12)
    assert rep.pairs[1].empirical == pytest.approx(math.log(0.2 / 0.3), abs=1e-12)
    assert rep.passed and rep.max_gap < 1e-12


def test_zero_weight_matches_fixed_metric(gaussian_line):
    fixed = verify_fixed_metric(gaussian_line, "x1^2/2", LINE_PAIRS, SCHED)
    a = verify_part_a(gaussian_line, 0.0, "x1^2/2", LINE_PAIRS, SCHED)
    b = verify_part_b(gaussian_line, 0.0, "x1^2/2", 1, LINE_PAIRS, SCHED)
    assert fixed.passed == a.passed == b.passed
    for f, pa, pb in zip(fixed.pairs, a.pairs, b.pairs):
        assert f.empirical == pa.empirical == pb.empirical


def test_part_b_constant_weight_flat_measure():
    s = build_grid([-1, -1], [1, 1], 201)
    rep = verify_part_b(s, 0.7, None, 2, [([0, 0], [0.5, 0.2])], RadiusSchedule(0.15, 0.85, 6))
    assert rep.passed and abs(rep.pairs[0].empirical) < 1e-9


def test_part_b_dimension_precondition():
    s = build_grid([-1, -1], [1, 1], 201)
    rep = verify_part_b(s, "0.3*sin(x1)", None, 3, [([0, 0], [0.5, 0.2])], RadiusSchedule(0.15, 0.85, 6))
    assert not rep.passed
    assert any("precondition" in n for n in rep.notes)


def test_report_serialization(gaussian_line):
    rep = verify_part_a(gaussian_line, 0.0, "x1^2/2", LINE_PAIRS, SCHED)
    d = rep.to_dict()
    assert d["pass"] is True and len(d["pairs"]) == 3
    assert rep.to_text().startswith("case part-a: PASS")


def test_uniformize_constant_f():
    s = build_grid([-1, -1], [1, 1], 101)
    f = field_from_expression(s, "1.5")
    assert uniformize(f, 2).conformal_weight.is_constant
    rep = verify_uniformizer(s, f, [([0, 0], [0.5, 0.5])], RadiusSchedule(0.1, 0.8, 5))
    assert abs(rep.pairs[0].empirical) < 1e-9


def test_uniformize_linear_on_line():
    s = build_grid([-2], [2], 4001)
    f = field_from_expression(s, "x1")
    U = uniformize(f, 1).conformal_weight
    np.testing.assert_allclose(U.values, s.points[:, 0], atol=1e-15)
    rep = verify_uniformizer(s, f, [([-1], [1]), ([0], [0.5])], SCHED)
    assert rep.passed and rep.max_gap <= 0.1


def test_uniformize_equals_zero_target():
    s = build_grid([-1, -1], [1, 1], 51)
    f = field_from_expression(s, "(x1^2 + x2^2)/2")
    a = uniformize(f, 2).conformal_weight
    b = target_metric_for_om(f, 0, 2).conformal_weight
    np.testing.assert_array_equal(a.values, b.values)
    assert a.expression.source == b.expression.source


def test_target_identity_case():
    s = build_grid([-1], [1], 2001)
    f = field_from_expression(s, "x1^2")
    assert np.all(target_metric_for_om(f, f, 1).conformal_weight.values == 0)
    rep = verify_target_om(s, f, f, [([0], [0.5]), ([-0.5], [0.8])], SCHED)
    assert rep.passed


def test_target_rejects_bad_dimension():
    s = build_grid([-1], [1], 11)
    with pytest.raises(ValueError):
        uniformize(field_from_expression(s, "x1"), 0)


def _exact_fit(alpha, C):
    return fit_small_ball(synthetic_source(lambda r: -C / r**alpha))


@pytest.mark.parametrize("alpha,C,Ux,Uy", [(2.0, 0.75, 0.3, 0.0), (1.0, 2.0, -0.2, 0.4), (0.5, 0.5, 0.1, -0.1)])
def test_synthetic_divergence_closed_form(alpha, C, Ux, Uy):
    radii = np.geomspace(0.2, 1e-6, 12)
    rep = synthetic_divergence(lambda s: -C / s**alpha, radii, Ux, Uy, _exact_fit(alpha, C))
    expected = C * radii**-alpha * (math.exp(-alpha * Uy) - math.exp(-alpha * Ux))
    np.testing.assert_allclose(rep.log_ratios, expected, rtol=1e-9)
    assert rep.rate_exponent == pytest.approx(alpha, rel=1e-9)
    assert rep.fitted_amplitude == pytest.approx(rep.predicted_amplitude, rel=1e-6)
    if rep.diverged:
        assert rep.direction == ("to-infinity" if Ux > Uy else "to-zero")


def test_analyze_divergence_bounded_sequence():
    rep = analyze_divergence([0.2, 0.1, 0.05, 0.025], [0.1, 0.1, 0.1, 0.1], 0.0, 0.0, _exact_fit(2, 0.75))
    assert not rep.diverged and not rep.passed and rep.direction == "none"


def test_probe_requires_distinct_weights():
    s = build_path_lattice(16, 1.0, ["0", "0.5*t"])
    with pytest.raises(ValueError):
        divergence_probe_c(s, "0.5", 1, 0, SCHED, _exact_fit(2, 0.75))
    with pytest.raises(ValueError):
        divergence_probe_c(build_grid([0], [1], 5), "x1", [0], [1], SCHED, _exact_fit(2, 0.75))


def test_rigidity_precondition_on_grid():
    s = build_grid([-1, -1], [1, 1], 51)
    rep = rigidity_check(s, 0, 1, measure(s), [([0, 0], [0.5, 0])], SCHED)
    assert rep.status == "precondition not met" and not rep.passed


def test_rigidity_constant_weights_agree():
    s = build_path_lattice(64, 1.0, ["0", "0.5*t"])
    mu0 = measure(s, method="transfer")
    sb = fit_small_ball(synthetic_source(lambda r: -0.75 / r**2))
    rep = rigidity_check(s, 0, 1, mu0, [(1, 0)], RadiusSchedule(0.2, 0.85, 8), sb)
    assert rep.passed and rep.constants_agree
    assert rep.constant_values["U1"][0] == pytest.approx(-0.125, abs=0.01)


def test_finite_lattice_saturates_at_dimension_law():
    # a 64-step lattice is 64-dimensional: the log-ratio tends to the
    # finite-dimensional prediction 64 (U(x) - U(y)) - OM0(x) instead of diverging
    lat = build_path_lattice(64, 1.0, ["0", "0.5*t"])
    U = field_from_expression(lat, "0.5*tanh(wT)")
    rep = divergence_probe_c(lat, U, 1, 0, RadiusSchedule(0.2, 0.5, 10), _exact_fit(2, 0.75), measure(lat, method="transfer"))
    limit = 64 * 0.5 * math.tanh(0.5) - 0.125
    assert not rep.diverged
    assert rep.log_ratios[-1] == pytest.approx(limit, abs=1e-3)
