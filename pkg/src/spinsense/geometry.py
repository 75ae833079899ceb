"""Physical model of a spinning robot: spin kinematics, receiver wedges, transmitter coverage.

Frames
------
Global frame is right-handed with z up. A robot's body frame rotates
counterclockwise about +z; its facing direction in the global frame is
``psi(t) = phase(t) + azimuth_mount``. In the body frame x points along the
facing direction and y to the left.

Each receiver has an apex at body point ``(0, plane_offset, 0)`` and an
orthonormal frame ``(x, n, v)`` with ``n = (0, cos tilt, sin tilt)`` and
``v = (0, -sin tilt, cos tilt)``. The mid-FOV surface is the plane ``n . d = 0``
(``d`` = transmitter minus apex); the finite FOV is the wedge
``|atan2(d.n, d.x)| <= half_width_h`` and ``|elevation in (x, n, v)| <= half_width_v``.

Left/right receivers are vertical planes parallel to the facing direction,
offset by +R/-R; the middle receiver plane contains the spin axis and is
tilted by ``tilt`` about the facing axis. With this layout the arrival-time
relations ``r = R / sin(w dt_LR / 2)`` and
``tan(alpha) = sin(w (t_M - t_facing)) cot(tilt)`` are exact.

Angles are radians, distances meters, times nanoseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

TWO_PI = 2.0 * math.pi
NS = 1e-9


class DegenerateGeometryError(ValueError):
    """Transmitter on the spin axis: bearing is undefined."""


class ReceiverId(str, Enum):
    LEFT = "L"
    MIDDLE = "M"
    RIGHT = "R"


class TxKind(str, Enum):
    TOP = "top"
    BOTTOM = "bottom"


RECEIVER_ORDER = (ReceiverId.LEFT, ReceiverId.MIDDLE, ReceiverId.RIGHT)


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return (np.asarray(a) + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class SpinState:
    """Constant-rate spin about a vertical axis through ``center``."""

    center: np.ndarray
    omega: float
    phase_ref_time: float = 0.0
    phase_at_ref: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")

    def phase(self, t):
        """Spin phase at time ``t`` (ns), wrapped to [0, 2pi)."""
        return (self.phase_at_ref + self.omega * (np.asarray(t, dtype=float) - self.phase_ref_time) * NS) % TWO_PI

    def unwrapped_phase(self, t):
        return self.phase_at_ref + self.omega * (np.asarray(t, dtype=float) - self.phase_ref_time) * NS

    @property
    def period_ns(self) -> float:
        return TWO_PI / self.omega / NS

    def advanced(self, t, omega=None) -> "SpinState":
        """Re-reference at time ``t``, optionally switching to a new rate from then on."""
        return SpinState(self.center, self.omega if omega is None else omega, float(t), float(self.phase(t)))


@dataclass(frozen=True)
class ReceiverSpec:
    id: ReceiverId
    plane_offset: float
    tilt_phi: float = 0.0
    half_width_h: float = math.radians(10.0)
    half_width_v: float = math.radians(50.0)
    azimuth_mount: float = 0.0

    def __post_init__(self):
        if not self.half_width_h > 0:
            raise ValueError("half_width_h must be positive")

    @property
    def normal(self) -> np.ndarray:
        return np.array([0.0, math.cos(self.tilt_phi), math.sin(self.tilt_phi)])

    @property
    def up(self) -> np.ndarray:
        return np.array([0.0, -math.sin(self.tilt_phi), math.cos(self.tilt_phi)])


@dataclass(frozen=True)
class TransmitterSpec:
    kind: TxKind
    z_offset: float
    visible_elevation_min: float
    visible_elevation_max: float


@dataclass(frozen=True)
class RobotGeometry:
    receivers: tuple[ReceiverSpec, ReceiverSpec, ReceiverSpec]
    transmitters: tuple[TransmitterSpec, TransmitterSpec]
    body_radius: float = 0.056

    def __post_init__(self):
        ids = sorted(rx.id.value for rx in self.receivers)
        if ids != ["L", "M", "R"]:
            raise ValueError(f"need exactly one L, M and R receiver, got {ids}")
        left, right = self.receiver(ReceiverId.LEFT), self.receiver(ReceiverId.RIGHT)
        if not math.isclose(left.plane_offset, -right.plane_offset) or self.receiver(ReceiverId.MIDDLE).plane_offset != 0:
            raise ValueError("receiver plane offsets must be +R, 0, -R")
        top, bottom = self.transmitter(TxKind.TOP), self.transmitter(TxKind.BOTTOM)
        if not bottom.visible_elevation_max > top.visible_elevation_min:
            raise ValueError("top and bottom coverage regions must overlap")

    def receiver(self, rid: ReceiverId) -> ReceiverSpec:
        rid = ReceiverId(rid)
        for rx in self.receivers:
            if rx.id is rid:
                return rx
        raise KeyError(rid)

    def transmitter(self, kind: TxKind) -> TransmitterSpec:
        kind = TxKind(kind)
        for tx in self.transmitters:
            if tx.kind is kind:
                return tx
        raise KeyError(kind)

    @property
    def side_offset(self) -> float:
        return self.receiver(ReceiverId.RIGHT).plane_offset * -1.0

    @property
    def tilt(self) -> float:
        return self.receiver(ReceiverId.MIDDLE).tilt_phi

    def ordered_receivers(self) -> list[ReceiverSpec]:
        return [self.receiver(rid) for rid in RECEIVER_ORDER]


def default_geometry(
    side_offset: float = 0.04,
    tilt_deg: float = 25.0,
    half_width_h_deg: float = 10.0,
    half_width_v_deg: float = 50.0,
    top_z: float = 0.019,
    bottom_z: float = -0.019,
    top_elevation_deg: tuple[float, float] = (-20.0, 90.0),
    bottom_elevation_deg: tuple[float, float] = (-90.0, 20.0),
    body_radius: float = 0.056,
) -> RobotGeometry:
    if not 0 < side_offset < body_radius:
        raise ValueError("side receiver offset must lie inside the body radius")
    hw, vw = math.radians(half_width_h_deg), math.radians(half_width_v_deg)
    receivers = (
        ReceiverSpec(ReceiverId.LEFT, side_offset, 0.0, hw, vw),
        ReceiverSpec(ReceiverId.MIDDLE, 0.0, math.radians(tilt_deg), hw, vw),
        ReceiverSpec(ReceiverId.RIGHT, -side_offset, 0.0, hw, vw),
    )
    transmitters = (
        TransmitterSpec(TxKind.TOP, top_z, *map(math.radians, top_elevation_deg)),
        TransmitterSpec(TxKind.BOTTOM, bottom_z, *map(math.radians, bottom_elevation_deg)),
    )
    return RobotGeometry(receivers, transmitters, body_radius)


def with_half_width(geometry: RobotGeometry, half_width_h: float) -> RobotGeometry:
    """Copy of ``geometry`` with every receiver's horizontal half-width replaced."""
    return replace(geometry, receivers=tuple(replace(rx, half_width_h=half_width_h) for rx in geometry.receivers))


def receiver_coordinates(center, psi, rx: ReceiverSpec, tx_pos):
    """Transmitter coordinates ``(d.x, d.n, d.v)`` in a receiver frame.

    ``center`` (..., 3), ``psi`` (...) facing angle of the body, ``tx_pos`` (..., 3).
    Broadcasts over leading dimensions.
    """
    rel = np.asarray(tx_pos, dtype=float) - np.asarray(center, dtype=float)
    psi = np.asarray(psi, dtype=float) + rx.azimuth_mount
    c, s = np.cos(psi), np.sin(psi)
    xb = c * rel[..., 0] + s * rel[..., 1]
    yb = -s * rel[..., 0] + c * rel[..., 1] - rx.plane_offset
    zb = rel[..., 2]
    ct, st = math.cos(rx.tilt_phi), math.sin(rx.tilt_phi)
    dn = ct * yb + st * zb
    dv = -st * yb + ct * zb
    return xb, dn, dv


def wedge_angles(center, psi, rx: ReceiverSpec, tx_pos):
    """Off-plane azimuth and in-frame elevation of a transmitter seen by ``rx``.

    Returns ``(azimuth, elevation, forward)``; azimuth is positive on the side
    the transmitter enters from while the body spins counterclockwise.
    """
    dx, dn, dv = receiver_coordinates(center, psi, rx, tx_pos)
    azimuth = np.arctan2(dn, dx)
    elevation = np.arctan2(dv, np.hypot(dx, dn))
    return azimuth, elevation, dx > 0


def in_fov(spin: SpinState, rx: ReceiverSpec, t, tx_pos, half_width_h=None):
    """True where the transmitter lies inside the receiver wedge at time ``t`` (ns).

    ``half_width_h`` may override the receiver's horizontal half-width (scalar
    or array broadcastable with ``t``), which is how boundary jitter is applied.
    A transmitter on the spin axis is never in view.
    """
    hw = rx.half_width_h if half_width_h is None else half_width_h
    tx_pos = np.asarray(tx_pos, dtype=float)
    psi = spin.phase(t)
    azimuth, elevation, forward = wedge_angles(spin.center, psi, rx, tx_pos)
    rel = tx_pos - spin.center
    on_axis = np.hypot(rel[..., 0], rel[..., 1]) < 1e-12
    inside = forward & (np.abs(azimuth) <= hw) & (np.abs(elevation) <= rx.half_width_v) & ~on_axis
    return bool(inside) if np.ndim(inside) == 0 else inside


def _horizontal(spin: SpinState, tx_pos):
    rel = np.asarray(tx_pos, dtype=float) - spin.center
    rho = math.hypot(rel[0], rel[1])
    if rho < 1e-12:
        raise DegenerateGeometryError("transmitter lies on the spin axis")
    return rho, math.atan2(rel[1], rel[0]), float(rel[2])


def _times_at_facing(spin: SpinState, psi_target: float, window) -> np.ndarray:
    t0, t1 = float(window[0]), float(window[1])
    base = (psi_target - spin.phase_at_ref) % TWO_PI
    period = spin.period_ns
    # phase(t) == psi_target (mod 2pi)  <=>  t = ref + (base + 2pi k)/omega
    first = spin.phase_ref_time + base / spin.omega / NS
    k0 = math.ceil((t0 - first) / period - 1e-12)
    k1 = math.floor((t1 - first) / period + 1e-12)
    ks = np.arange(k0, k1 + 1)
    times = first + ks * period
    return times[(times >= t0) & (times <= t1)]


def body_offset_at_crossing(rx: ReceiverSpec, rho: float, height: float):
    """Body-frame angle ``gamma`` of the transmitter when it sits on the mid-plane.

    ``gamma`` is the transmitter azimuth minus the facing direction. Returns
    None when the plane never contains the transmitter.
    """
    ct, st = math.cos(rx.tilt_phi), math.sin(rx.tilt_phi)
    s = (rx.plane_offset * ct - st * height) / (rho * ct)
    if abs(s) > 1.0:
        return None
    return math.asin(s)


def body_offset_at_leading_edge(rx: ReceiverSpec, rho: float, height: float, half_width_h=None):
    """Body-frame angle at which the transmitter enters the wedge's leading face."""
    hw = rx.half_width_h if half_width_h is None else half_width_h
    ct, st = math.cos(rx.tilt_phi), math.sin(rx.tilt_phi)
    amp = math.hypot(ct, math.tan(hw))
    eps = math.atan2(math.tan(hw), ct)
    s = (rx.plane_offset * ct - st * height) / (amp * rho)
    if abs(s) > 1.0:
        return None
    return eps + math.asin(s)


def mid_plane_crossing_times(spin: SpinState, rx: ReceiverSpec, tx_pos, revolution_window) -> np.ndarray:
    """Exact times (ns) in ``revolution_window`` when ``tx_pos`` lies on the receiver mid-plane.

    Empty when the plane never reaches the transmitter (``|plane_offset|``
    larger than the horizontal distance).
    """
    rho, beta, height = _horizontal(spin, tx_pos)
    gamma = body_offset_at_crossing(rx, rho, height)
    if gamma is None:
        return np.empty(0)
    return _times_at_facing(spin, beta - gamma - rx.azimuth_mount, revolution_window)


def leading_edge_times(spin: SpinState, rx: ReceiverSpec, tx_pos, revolution_window, half_width_h=None) -> np.ndarray:
    """Exact times the transmitter enters the receiver wedge (horizontal face only)."""
    rho, beta, height = _horizontal(spin, tx_pos)
    gamma = body_offset_at_leading_edge(rx, rho, height, half_width_h)
    if gamma is None:
        return np.empty(0)
    return _times_at_facing(spin, beta - gamma - rx.azimuth_mount, revolution_window)


def facing_times(spin: SpinState, tx_pos, revolution_window, azimuth_mount: float = 0.0) -> np.ndarray:
    """Times the body facing direction points at the transmitter azimuth."""
    _, beta, _ = _horizontal(spin, tx_pos)
    return _times_at_facing(spin, beta - azimuth_mount, revolution_window)


def elevation_of(from_pos, to_pos):
    """Elevation angle of ``to_pos`` seen from ``from_pos``."""
    d = np.asarray(to_pos, dtype=float) - np.asarray(from_pos, dtype=float)
    return np.arctan2(d[..., 2], np.hypot(d[..., 0], d[..., 1]))


def transmitter_visible(tx: TransmitterSpec, tx_robot_pos, rx_pos, max_range: float):
    """Range gate plus the transmitter's coverage region (chassis occlusion).

    The elevation is that of the receiver as seen from the LED cluster.
    """
    if not max_range > 0:
        raise ValueError("max_range must be positive")
    led = np.asarray(tx_robot_pos, dtype=float) + np.array([0.0, 0.0, tx.z_offset])
    d = np.asarray(rx_pos, dtype=float) - led
    dist = np.sqrt(np.sum(d * d, axis=-1))
    elev = np.arctan2(d[..., 2], np.hypot(d[..., 0], d[..., 1]))
    ok = (dist <= max_range) & (elev >= tx.visible_elevation_min) & (elev <= tx.visible_elevation_max)
    return bool(ok) if np.ndim(ok) == 0 else ok


def led_position(tx: TransmitterSpec, robot_pos):
    return np.asarray(robot_pos, dtype=float) + np.array([0.0, 0.0, tx.z_offset])
