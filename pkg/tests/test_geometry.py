import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from spinsense.geometry import (
    NS,
    TWO_PI,
    DegenerateGeometryError,
    ReceiverId,
    SpinState,
    TxKind,
    body_offset_at_crossing,
    default_geometry,
    facing_times,
    in_fov,
    leading_edge_times,
    mid_plane_crossing_times,
    receiver_coordinates,
    transmitter_visible,
    wrap_angle,
    with_half_width,
)

OMEGA = 50.0 * math.pi


def spin_at(phase0=0.3):
    return SpinState(np.zeros(3), OMEGA, 0.0, phase0)


def root_times(f, t0, t1, n=4000):
    """Independent oracle: sign changes of f on a dense grid, refined by Brent's method."""
    ts = np.linspace(t0, t1, n)
    vals = np.array([f(t) for t in ts])
    out = []
    for a, b, fa, fb in zip(ts[:-1], ts[1:], vals[:-1], vals[1:]):
        if fa == 0:
            out.append(a)
        elif fa * fb < 0:
            out.append(brentq(f, a, b, xtol=1e-9))
    return np.array(out)


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_angle_range(a):
    w = float(wrap_angle(a))
    assert -math.pi <= w < math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_spin_phase_and_period():
    s = spin_at(0.0)
    assert s.period_ns == pytest.approx(40e6)
    assert float(s.phase(10e6)) == pytest.approx(math.pi / 2)
    later = s.advanced(5e6, omega=OMEGA * 1.01)
    assert float(later.phase(5e6)) == pytest.approx(float(s.phase(5e6)))
    with pytest.raises(ValueError):
        SpinState(np.zeros(3), 0.0)


def test_default_geometry_layout(geometry):
    assert geometry.side_offset == pytest.approx(0.04)
    assert geometry.tilt == pytest.approx(math.radians(25))
    assert geometry.receiver("M").plane_offset == 0
    with pytest.raises(ValueError):
        default_geometry(side_offset=0.08)


@pytest.mark.parametrize("rid", ["L", "M", "R"])
@pytest.mark.parametrize("pos", [(0.3, 0.1, 0.05), (-0.2, 0.25, -0.04), (0.07, -0.4, 0.0)])
def test_crossing_times_match_root_oracle(geometry, rid, pos):
    rx = geometry.receiver(rid)
    spin = spin_at()
    window = (0.0, 2 * spin.period_ns)
    got = mid_plane_crossing_times(spin, rx, pos, window)

    def coords(t):
        return receiver_coordinates(spin.center, spin.phase(t), rx, np.array(pos))

    # roots of the continuous normal offset; only crossings in front of the receiver count
    roots = [t for t in root_times(lambda t: float(coords(t)[1]), *window) if coords(t)[0] > 0]
    assert len(got) == len(roots) == 2
    np.testing.assert_allclose(got, roots, atol=1.0)


def test_leading_edge_is_wedge_boundary(geometry):
    rx = geometry.receiver("M")
    spin = spin_at()
    pos = np.array([0.25, -0.1, 0.06])
    t = leading_edge_times(spin, rx, pos, (0, spin.period_ns))[0]
    assert in_fov(spin, rx, t + 1e3, pos)
    assert not in_fov(spin, rx, t - 1e3, pos)
    dx, dn, _ = receiver_coordinates(spin.center, spin.phase(t), rx, pos)
    assert math.atan2(dn, dx) == pytest.approx(rx.half_width_h, abs=1e-9)


def test_receivers_cross_left_middle_right(geometry):
    spin = spin_at()
    pos = (0.3, 0.0, 0.0)
    window = (0, spin.period_ns)
    tL, tM, tR = (mid_plane_crossing_times(spin, geometry.receiver(r), pos, window)[0] for r in "LMR")
    assert tL < tM < tR
    tf = facing_times(spin, pos, window)[0]
    assert (tL + tR) / 2 == pytest.approx(tf, abs=1e-3)
    assert tM == pytest.approx(tf, abs=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 0.5), st.floats(-0.3, 0.3), st.floats(0, TWO_PI))
def test_side_crossings_symmetric_about_facing(rho, h, beta):
    g = default_geometry()
    spin = spin_at()
    pos = (rho * math.cos(beta), rho * math.sin(beta), h)
    window = (0, 3 * spin.period_ns)
    tL = mid_plane_crossing_times(spin, g.receiver("L"), pos, window)
    tR = mid_plane_crossing_times(spin, g.receiver("R"), pos, window)
    tF = facing_times(spin, pos, window)
    # pair each facing time with the L crossing before and the R crossing after it
    for tf in tF:
        before = tL[tL < tf]
        after = tR[tR > tf]
        if len(before) and len(after) and after[0] - before[-1] < spin.period_ns / 2:
            assert (before[-1] + after[0]) / 2 == pytest.approx(tf, abs=1e-3)


def test_crossing_absent_inside_offset(geometry):
    assert body_offset_at_crossing(geometry.receiver("L"), 0.03, 0.0) is None
    spin = spin_at()
    assert len(mid_plane_crossing_times(spin, geometry.receiver("L"), (0.03, 0, 0), (0, spin.period_ns))) == 0


def test_on_axis_is_degenerate(geometry):
    spin = spin_at()
    with pytest.raises(DegenerateGeometryError):
        mid_plane_crossing_times(spin, geometry.receiver("M"), (0, 0, 0.2), (0, spin.period_ns))
    assert not in_fov(spin, geometry.receiver("M"), 0.0, np.array([0.0, 0.0, 0.2]))


def test_in_fov_vectorized_matches_scalar(geometry):
    spin = spin_at()
    rx = geometry.receiver("R")
    pos = np.array([0.2, 0.15, 0.02])
    ts = np.linspace(0, spin.period_ns, 500)
    vec = in_fov(spin, rx, ts, pos)
    assert vec.dtype == bool and vec.any()
    assert all(vec[i] == in_fov(spin, rx, ts[i], pos) for i in range(0, 500, 25))
    # visible fraction of a revolution is close to the full wedge width
    assert vec.mean() == pytest.approx(2 * rx.half_width_h / TWO_PI, abs=0.01)


def test_half_width_override(geometry):
    narrow = with_half_width(geometry, math.radians(2))
    assert all(rx.half_width_h == pytest.approx(math.radians(2)) for rx in narrow.receivers)


def test_transmitter_coverage_regions(geometry):
    top = geometry.transmitter(TxKind.TOP)
    bottom = geometry.transmitter(TxKind.BOTTOM)
    robot = np.zeros(3)
    below = np.array([0.2, 0.0, -0.2])
    above = np.array([0.2, 0.0, 0.2])
    assert not transmitter_visible(top, robot, below, 0.5)
    assert transmitter_visible(bottom, robot, below, 0.5)
    assert transmitter_visible(top, robot, above, 0.5)
    assert not transmitter_visible(bottom, robot, above, 0.5)
    assert not transmitter_visible(top, robot, np.array([0.6, 0, 0.02]), 0.5)
    level = np.array([0.3, 0.0, 0.0])
    assert transmitter_visible(top, robot, level, 0.5) and transmitter_visible(bottom, robot, level, 0.5)
    with pytest.raises(ValueError):
        transmitter_visible(top, robot, level, 0.0)


def test_receiver_ids_are_strings():
    assert ReceiverId("L") is ReceiverId.LEFT
    assert TxKind("bottom") is TxKind.BOTTOM
    assert NS == 1e-9
