import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omlab.geodesic import (
    conformal_distance,
    distances_from,
    export_ball_csv,
    geodesic_path,
    metric_ball,
    polypath,
    sandwich_check,
)
from omlab.spaces import (
    build_atoms,
    build_grid,
    build_path_lattice,
    constant_field,
    estimate_modulus,
    field_from_expression,
    metric,
)


def test_euclidean_segment(unit_square):
    assert conformal_distance(unit_square, None, [0, 0], [0.75, 0]) == pytest.approx(0.75, rel=0.01)


def test_constant_weight_scales_distance(unit_square):
    U = constant_field(unit_square, math.log(2))
    assert conformal_distance(unit_square, U, [0, 0], [0.75, 0]) == pytest.approx(0.375, rel=0.01)


def test_one_dimensional_quadrature_oracle():
    s = build_grid([0], [3], 3001)
    U = field_from_expression(s, "x1")
    assert conformal_distance(s, U, [0], [2]) == pytest.approx(1 - math.exp(-2), rel=0.01)


def test_diagonal_is_within_stencil_error(unit_square):
    # 16-neighbour stencil: worst-case relative overestimate below 3 percent
    d = conformal_distance(unit_square, "0*x1", [0.1, 0.2], [0.73, 0.41])
    assert math.hypot(0.63, 0.21) <= d <= 1.03 * math.hypot(0.63, 0.21)


def test_euclidean_ball_members(unit_square):
    x = np.array([0.5, 0.5])
    ball = metric_ball(unit_square, metric(unit_square), x, 0.3)
    eu = np.linalg.norm(unit_square.points - x, axis=1)
    np.testing.assert_array_equal(ball.members, np.flatnonzero(eu <= 0.3 * (1 + 1e-9)))
    assert not ball.saturated


@pytest.mark.parametrize("n", [41, 81])
def test_graph_ball_within_one_cell(n):
    # "0*x1" is not flagged constant, so this goes through the stencil
    s = build_grid([0, 0], [1, 1], n)
    x = np.array([0.5, 0.5])
    ball = metric_ball(s, metric(s, "0*x1"), x, 0.3)
    eu = np.linalg.norm(s.points - x, axis=1)
    diff = np.setxor1d(np.flatnonzero(eu <= 0.3 + 1e-12), ball.members)
    assert np.all(np.abs(eu[diff] - 0.3) <= s.spacing[0])


def test_graph_boundary_error_bounded_by_stencil(unit_square):
    # on fine grids the stencil's angular error (below 3 percent) dominates
    x = np.array([0.5, 0.5])
    ball = metric_ball(unit_square, metric(unit_square, "0*x1"), x, 0.3)
    eu = np.linalg.norm(unit_square.points - x, axis=1)
    assert set(ball.members) <= set(np.flatnonzero(eu <= 0.3 + 1e-12))
    missing = np.setdiff1d(np.flatnonzero(eu <= 0.3), ball.members)
    assert np.all(eu[missing] >= 0.3 / 1.03)


def test_constant_weight_ball_is_scaled_base_ball(unit_square):
    c = 0.4
    b = metric_ball(unit_square, metric(unit_square, c), [0.5, 0.5], 0.1)
    b0 = metric_ball(unit_square, metric(unit_square), [0.5, 0.5], 0.1 * math.exp(c))
    np.testing.assert_array_equal(b.members, b0.members)


def test_huge_radius_saturates():
    s = build_grid([0, 0], [1, 1], 11)
    b = metric_ball(s, metric(s), [0.5, 0.5], 10 * math.sqrt(2))
    assert b.saturated and len(b.members) == s.size


def test_ball_rejects_nonpositive_radius(unit_square):
    with pytest.raises(ValueError):
        metric_ball(unit_square, metric(unit_square), [0.5, 0.5], 0.0)


def test_path_lattice_ball_is_a_predicate():
    s = build_path_lattice(8, 1.0, ["0"])
    U = field_from_expression(s, "0.5*tanh(wT)")
    b = metric_ball(s, metric(s, U), 0, 0.2)
    assert b.base_radius == pytest.approx(0.2)
    paths = np.array([np.full(8, 0.1), np.full(8, 0.3)])
    np.testing.assert_array_equal(b.contains(paths), [True, False])


def test_atoms_shortest_chain():
    s = build_atoms([0.0, 1.0, 2.0], [1, 1, 1])
    U = field_from_expression(s, "0*x1 + 1")
    assert conformal_distance(s, U, 0, 2) == pytest.approx(2 * math.exp(-1))


def test_geodesic_path_length_matches_distance(unit_square):
    U = field_from_expression(unit_square, "0.3*sin(4*x1)")
    p = geodesic_path(unit_square, U, [0.1, 0.1], [0.9, 0.6])
    d = conformal_distance(unit_square, U, [0.1, 0.1], [0.9, 0.6])
    assert p.conformal_length == pytest.approx(d, rel=1e-9)
    straight = polypath(unit_square, U, [[0.1, 0.1], [0.9, 0.6]])
    assert straight.base_length == pytest.approx(math.hypot(0.8, 0.5))


def test_export_ball_csv(tmp_path, unit_square):
    b = metric_ball(unit_square, metric(unit_square), [0.5, 0.5], 0.02)
    export_ball_csv(b, tmp_path / "ball.csv")
    rows = list(csv.reader(open(tmp_path / "ball.csv")))
    assert rows[0] == ["point_id", "x1", "x2", "distance"]
    assert len(rows) - 1 == len(b.members)


def test_sandwich_trivial_weight(unit_square):
    U = constant_field(unit_square, 0.0)
    om = estimate_modulus(U, [0.5, 0.5], 0.5)
    rep = sandwich_check(unit_square, U, [0.5, 0.5], 0.1, om)
    assert rep.holds and rep.inner_radius == rep.outer_radius == pytest.approx(0.1)


def test_sandwich_holds_for_sine(unit_square):
    U = field_from_expression(unit_square, "0.3*sin(x1)")
    om = estimate_modulus(U, [0.5, 0.5], 0.2)
    assert sandwich_check(unit_square, U, [0.5, 0.5], 0.05, om).holds


@pytest.mark.parametrize("r", [0.05, 0.1])
def test_sandwich_understated_modulus_has_witnesses(unit_square, r):
    # a steep ramp through the centre makes half the modulus too small
    U = field_from_expression(unit_square, "0.5*tanh((x1 - 0.5)/0.02)")
    om = estimate_modulus(U, [0.5, 0.5], 0.4)
    assert sandwich_check(unit_square, U, [0.5, 0.5], r, om).holds
    rep = sandwich_check(unit_square, U, [0.5, 0.5], r, om.scaled(0.5))
    assert not rep.holds and rep.witnesses.size > 0


def test_sandwich_zero_modulus_fails_for_sine(unit_square):
    U = field_from_expression(unit_square, "0.3*sin(x1)")
    om = estimate_modulus(U, [0.5, 0.5], 0.2)
    assert not sandwich_check(unit_square, U, [0.5, 0.5], 0.05, om.scaled(0.0)).holds


grid = build_grid([0, 0], [1, 1], 41)
weight = field_from_expression(grid, "0.5*sin(3*x1) + 0.2*x2")
coord = st.floats(0, 1)


@settings(max_examples=25, deadline=None)
@given(coord, coord, coord, coord, coord, coord)
def test_triangle_inequality_and_symmetry(a, b, c, d, e, f):
    m = metric(grid, weight)
    x, y, z = grid.locate([a, b]), grid.locate([c, d]), grid.locate([e, f])
    dx, dy = distances_from(m, x), distances_from(m, y)
    assert dx[y] == pytest.approx(dy[x], rel=1e-12)
    assert dx[z] <= dx[y] + dy[z] + 1e-12


@settings(max_examples=25, deadline=None)
@given(coord, coord, st.floats(0.05, 0.4), st.floats(0.05, 0.4))
def test_balls_nested_in_radius(a, b, r1, r2):
    m = metric(grid, weight)
    lo, hi = sorted((r1, r2))
    small = metric_ball(grid, m, [a, b], lo)
    big = metric_ball(grid, m, [a, b], hi)
    assert set(small.members) <= set(big.members)
