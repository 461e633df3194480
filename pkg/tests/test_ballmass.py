import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from omlab.ballmass import (
    CSV_COLUMNS,
    PathSampler,
    RadiusSchedule,
    ball_mass,
    ball_masses,
    smallball_probability,
    transfer_log_probability,
    write_mass_csv,
)
from omlab.geodesic import metric_ball
from omlab.spaces import build_atoms, build_grid, build_path_lattice, measure, metric


@pytest.fixture(scope="module")
def plane():
    return build_grid([-1, -1], [1, 1], 401)


def test_disk_area(plane):
    b = metric_ball(plane, metric(plane), [0, 0], 0.5)
    e = ball_mass(measure(plane), b)
    assert e.method == "quadrature" and e.std_error == 0
    assert e.mass == pytest.approx(math.pi / 4, rel=0.02)


def test_gaussian_disk_polar_oracle(plane):
    r = 0.1
    b = metric_ball(plane, metric(plane), [0, 0], r)
    e = ball_mass(measure(plane, "(x1^2 + x2^2)/2"), b)
    assert e.mass == pytest.approx(2 * math.pi * (1 - math.exp(-r * r / 2)), rel=0.02)
    assert 2 * math.pi * (1 - math.exp(-r * r / 2)) == pytest.approx(0.031337, abs=1e-6)


def test_atom_ball_mass_exact():
    s = build_atoms([0.0, 1.0], [0.2, 0.8], ["a", "b"])
    e = ball_mass(measure(s), metric_ball(s, metric(s), "a", 0.5))
    assert e.mass == 0.2 and e.method == "atom-sum"


def test_ball_masses_match_single_balls(plane):
    mu, d = measure(plane, "x1"), metric(plane, "0.2*x2")
    radii = [0.05, 0.1, 0.2]
    batch = ball_masses(mu, d, [0.1, -0.2], radii)
    for r, e in zip(radii, batch):
        single = ball_mass(mu, metric_ball(plane, d, [0.1, -0.2], r))
        assert e.mass == pytest.approx(single.mass, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0.01, 0.6), min_size=2, max_size=6, unique=True), st.floats(-0.5, 0.5))
def test_mass_monotone_in_radius(radii, c):
    s = build_grid([-1, -1], [1, 1], 61)
    masses = [e.mass for e in ball_masses(measure(s, "x1^2"), metric(s, "0.3*sin(2*x1)"), [c, 0], sorted(radii))]
    assert all(a <= b for a, b in zip(masses, masses[1:]))


def test_single_step_matches_erf():
    for r in (0.3, 1.0):
        e = smallball_probability(1, 0.0, r, 20_000, seed=3)
        assert abs(e.mass - erf(r / math.sqrt(2))) <= 3 * e.std_error


def test_sure_event():
    e = smallball_probability(16, 0.0, 100.0, 5000, seed=1)
    assert e.mass == 1.0 and e.std_error == 0.0


def test_independent_seeds_agree():
    a = smallball_probability(64, 0.0, 0.5, 100_000, seed=0)
    b = smallball_probability(64, 0.0, 0.5, 100_000, seed=7)
    assert abs(a.mass - b.mass) <= 3 * math.hypot(a.std_error, b.std_error)


def test_bit_exact_across_worker_counts():
    one = smallball_probability(64, 0.0, 0.5, 50_000, seed=11, workers=1)
    four = smallball_probability(64, 0.0, 0.5, 50_000, seed=11, workers=4)
    assert one.mass == four.mass and one.std_error == four.std_error


def test_sampler_partitions_cover_all_samples():
    sampler = PathSampler(np.linspace(0.25, 1, 4), 1003, seed=2, partitions=7)
    sizes = [len(p) for p in sampler.reduce(lambda p: p)]
    assert sum(sizes) == 1003


def test_sampler_covariance():
    times = np.array([0.25, 0.5, 1.0])
    paths = np.concatenate(PathSampler(times, 200_000, seed=5).reduce(lambda p: p))
    np.testing.assert_allclose(np.cov(paths.T), np.minimum.outer(times, times), atol=0.01)


def test_mc_argument_guards():
    with pytest.raises(ValueError):
        smallball_probability(0, 0.0, 0.5, 5000)
    with pytest.raises(ValueError):
        smallball_probability(4, 0.0, 0.5, 10)


def test_underflow_reports_upper_bound():
    e = smallball_probability(64, 0.0, 0.05, 2000, seed=0)
    assert e.mass == 0 and e.underflow
    assert e.upper_bound == pytest.approx(3 / 2000)


def test_transfer_single_step_is_erf():
    lp = transfer_log_probability(np.array([1.0]), np.array([0.0]), 0.7)
    assert math.exp(lp) == pytest.approx(erf(0.7 / math.sqrt(2)), rel=1e-12)


@pytest.mark.parametrize("center", ["0", "0.2*t"])
def test_transfer_agrees_with_monte_carlo(center):
    s = build_path_lattice(64, 1.0, [center])
    mc = ball_mass(measure(s, samples=100_000), metric_ball(s, metric(s), 0, 0.6))
    tr = ball_mass(measure(s, method="transfer"), metric_ball(s, metric(s), 0, 0.6))
    assert abs(mc.mass - tr.mass) <= 3 * mc.std_error


def test_transfer_terminal_tilt_agrees_with_monte_carlo():
    s = build_path_lattice(32, 1.0)
    ball = metric_ball(s, metric(s), 0, 0.8)
    mc = ball_mass(measure(s, "wT^2", samples=100_000), ball)
    tr = ball_mass(measure(s, "wT^2", method="transfer"), ball)
    assert abs(mc.mass - tr.mass) <= 3 * mc.std_error


def test_transfer_rejects_non_terminal_tilt():
    s = build_path_lattice(8)
    with pytest.raises(ValueError, match="wT"):
        ball_mass(measure(s, "wsup", method="transfer"), metric_ball(s, metric(s), 0, 0.5))


def test_transfer_resolves_tiny_probabilities():
    s = build_path_lattice(64)
    e = ball_mass(measure(s, method="transfer"), metric_ball(s, metric(s), 0, 0.05))
    # far below any Monte Carlo floor, still resolved
    assert e.mass < 1e-30 and math.isfinite(e.log_mass)
    assert e.log_mass == pytest.approx(math.log(e.mass))


def test_schedule_radii_and_guards():
    sch = RadiusSchedule(0.2, 0.5, 3)
    np.testing.assert_allclose(sch.radii, [0.2, 0.1, 0.05])
    assert sch.scope == pytest.approx(2.0)
    for bad in (dict(r_max=-1), dict(r_max=1, ratio=1.2), dict(r_max=1, count=1), dict(r_max=1, multipliers=(0,))):
        with pytest.raises(ValueError):
            RadiusSchedule(**bad)


def test_mass_csv(tmp_path, plane):
    rows = ball_masses(measure(plane), metric(plane), [0, 0], [0.1, 0.2])
    write_mass_csv(rows, tmp_path / "m.csv", "abc123")
    lines = open(tmp_path / "m.csv").read().splitlines()
    assert lines[0] == "# config_digest=abc123"
    body = list(csv.reader(lines[1:]))
    assert tuple(body[0]) == CSV_COLUMNS and len(body) == 3
