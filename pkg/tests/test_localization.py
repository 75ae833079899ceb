import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinsense.geometry import NS, TxKind
from spinsense.localization import (
    AssumptionMonitor,
    FacingObservation,
    Localizer,
    NoElevationData,
    NoPairedObservations,
    SolverConfig,
    Underdetermined,
    estimate_omega,
    filter_estimate,
    solve_xy,
    solve_z,
)
from spinsense.sensing import RelativeMeasurement, interval_sigma_t

OMEGA = 50.0 * math.pi
RING = np.array([[0.3 * math.cos(a), 0.3 * math.sin(a), 0.05] for a in (0.0, 2.0944, 4.1888)])


def observe(s, theta0, beacons, rng=None, sigma_r=0.005, sigma_t=interval_sigma_t(), t0=1e9, omega=OMEGA):
    """Facing times and ranges from a drone at ``s`` whose heading is ``theta0`` at ``t0``."""
    out = []
    for i, p in enumerate(beacons):
        d = p[:2] - s[:2]
        r = float(np.hypot(*d))
        dt = ((math.atan2(d[1], d[0]) - theta0) % (2 * math.pi)) / omega
        if rng is not None:
            r += rng.normal(0, sigma_r)
            dt += rng.normal(0, sigma_t)
        out.append(FacingObservation(i, t0 + dt / NS, r, sigma_r, p))
    return out


def test_estimate_omega_example():
    obs = [FacingObservation(1, 40e6, 0.3, 0.01, np.zeros(3), 0.0),
           FacingObservation(2, 50e6, 0.3, 0.01, np.ones(3), 10.1e6)]
    assert estimate_omega(obs) == pytest.approx(2 * math.pi * 2 / 0.0799)
    with pytest.raises(NoPairedObservations):
        estimate_omega([FacingObservation(1, 40e6, 0.3, 0.01, np.zeros(3))])


def test_estimate_omega_tracks_drift():
    period = 2 * math.pi / (OMEGA * 1.01)
    obs = [FacingObservation(i, 1e9 + k * 1e6 + period / NS, 0.3, 0.01, RING[i], 1e9 + k * 1e6) for i, k in enumerate((0, 7, 13))]
    assert estimate_omega(obs) == pytest.approx(OMEGA * 1.01, rel=1e-9)


def test_noiseless_solve_is_exact():
    s = np.array([0.03, -0.02, 0.1])
    sol = solve_xy(observe(s, 0.4, RING), OMEGA)
    np.testing.assert_allclose(sol.s_xy, s[:2], atol=1e-12)
    assert sol.sigma_xy > 0 and sol.cost < 1e-18


def test_heading_reference_time():
    # t_x is when the drone's reference direction faced world +x
    s = np.array([0.0, 0.0, 0.0])
    sol = solve_xy(observe(s, 0.4, RING), OMEGA)
    theta_at_t0 = 0.4
    expected = 1e9 - theta_at_t0 / OMEGA / NS
    period = 2 * math.pi / OMEGA / NS
    assert ((sol.t_x - expected + period / 2) % period) - period / 2 == pytest.approx(0, abs=1e-3)


def test_monte_carlo_covariance(rng):
    s = np.array([0.04, 0.01, 0.1])
    ref = solve_xy(observe(s, 1.0, RING), OMEGA)
    sols = np.array([solve_xy(observe(s, 1.0, RING, rng), OMEGA).s_xy for _ in range(1500)])
    emp = np.cov(sols.T)
    np.testing.assert_allclose(np.diag(emp), np.diag(ref.cov_xy), rtol=0.15)
    np.testing.assert_allclose(sols.mean(axis=0), s[:2], atol=3 * ref.sigma_xy / math.sqrt(1500) + 1e-4)


def test_more_neighbors_lower_sigma():
    s = np.zeros(3)
    two = solve_xy(observe(s, 0.0, RING[:2]), OMEGA)
    three = solve_xy(observe(s, 0.0, RING), OMEGA)
    assert three.sigma_xy < two.sigma_xy


def test_underdetermined():
    with pytest.raises(Underdetermined):
        solve_xy(observe(np.zeros(3), 0.0, RING[:1]), OMEGA)
    same = observe(np.zeros(3), 0.0, np.array([RING[0], RING[0]]))
    with pytest.raises(Underdetermined):
        solve_xy(same, OMEGA)
    with pytest.raises(Underdetermined):
        solve_xy(observe(np.zeros(3), 0.0, RING), OMEGA, config=SolverConfig(min_neighbors_xy=4))


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.08, 0.08), st.floats(-0.08, 0.08), st.floats(0, 2 * math.pi), st.integers(0, 3))
def test_period_wrap_invariance(x, y, theta, k):
    s = np.array([x, y, 0.0])
    obs = observe(s, theta, RING)
    period = 2 * math.pi / OMEGA / NS
    shifted = [FacingObservation(o.neighbor_id, o.t_i + (k if o.neighbor_id == 1 else 0) * period, o.r, o.sigma_r,
                                 o.neighbor_pos) for o in obs]
    np.testing.assert_allclose(solve_xy(shifted, OMEGA).s_xy, s[:2], atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-math.pi, math.pi))
def test_translation_and_rotation_equivariance(tx, ty, rot):
    s = np.array([0.02, -0.03, 0.0])
    c, si = math.cos(rot), math.sin(rot)
    Rm = np.array([[c, -si, 0], [si, c, 0], [0, 0, 1]])
    beacons = RING @ Rm.T + [tx, ty, 0]
    s2 = Rm @ s + [tx, ty, 0]
    sol = solve_xy(observe(s2, 0.3 + rot, beacons), OMEGA)
    np.testing.assert_allclose(sol.s_xy, s2[:2], atol=1e-9)


def test_solve_z_example_and_sign():
    o = FacingObservation(1, 0.0, 0.3, 0.005, np.array([0.3, 0.0, 0.05]), alpha=math.atan2(0.05 - 0.1, 0.3),
                          sigma_alpha=0.01)
    assert solve_z(0.0, 0.0, 0.003, [o]) == pytest.approx(0.1)
    up = FacingObservation(1, 0.0, 0.3, 0.005, np.array([0.3, 0.0, 0.05]), alpha=math.radians(10), sigma_alpha=0.01)
    assert solve_z(0.0, 0.0, 0.003, [up]) < 0.05
    with pytest.raises(NoElevationData):
        solve_z(0.0, 0.0, 0.003, [FacingObservation(1, 0.0, 0.3, 0.005, np.zeros(3))])


def test_solve_z_weights_closer_neighbors():
    near = FacingObservation(1, 0.0, 0.1, 0.005, np.array([0.1, 0.0, 0.0]), alpha=math.atan2(-0.1, 0.1), sigma_alpha=0.01)
    far = FacingObservation(2, 0.0, 0.5, 0.005, np.array([0.5, 0.0, 0.0]), alpha=math.atan2(-0.2, 0.5), sigma_alpha=0.01)
    z = solve_z(0.0, 0.0, 0.0, [near, far])
    assert 0.1 < z < 0.15


def test_filter_coefficient():
    out = filter_estimate(np.zeros(3), np.ones(3), 0.04, 0.06)
    np.testing.assert_allclose(out, 0.48658, atol=1e-5)
    np.testing.assert_allclose(filter_estimate(None, [1, 2, 3], 0.04), [1, 2, 3])
    with pytest.raises(ValueError):
        filter_estimate(np.zeros(3), np.ones(3), 0.0)


def test_monitor_logs_first_violation_at_warning(caplog):
    m = AssumptionMonitor()
    with caplog.at_level(logging.DEBUG, logger="spinsense.localization"):
        m.check(OMEGA, [0, 0, 0])
        m.check(OMEGA * 1.02, [0, 0, 0])
        m.check(OMEGA * 1.04, [0, 0, 0])
    levels = [r.levelno for r in caplog.records]
    assert levels == [logging.WARNING, logging.DEBUG]
    assert m.omega_violations == 2 and m.position_violations == 0


def test_peer_sigma_inflates_range_spread():
    m = RelativeMeasurement(11, 0.3, None, 0.0, 0.004, None, np.zeros(3), TxKind.TOP, peer_sigma=0.003)
    assert FacingObservation.from_measurement(m).sigma_r == pytest.approx(0.005)


def test_localizer_filters_between_revolutions():
    loc = Localizer()
    a = loc.update(observe(np.zeros(3), 0.0, RING), OMEGA, 1e9)
    np.testing.assert_allclose(a.s[:2], 0.0, atol=1e-12)
    b = loc.update(observe(np.array([0.01, 0, 0]), 0.0, RING, t0=1.04e9), OMEGA, 1.04e9)
    assert b.s[0] == pytest.approx(0.01 * 0.48658, abs=1e-6)
    assert b.revolution_index == 2 and b.n_neighbors == 3
