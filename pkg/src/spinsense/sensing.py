"""Arrival timing to relative range/elevation, with calibration.

A *visit* is one sweep of the three receivers over a neighbor: the left,
middle and right receivers each start picking up that neighbor's packets
within a fraction of a revolution of each other. Visits are separated by
silences of at least half a revolution, which is how per-revolution timing
records are cut without knowing the bearing in advance.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import curve_fit, nnls

from .channel import ORIGIN_BIT, ChannelConfig, collision_flags, receiver_rng
from .geometry import (
    NS,
    TWO_PI,
    RobotGeometry,
    SpinState,
    TxKind,
    default_geometry,
    mid_plane_crossing_times,
    transmitter_visible,
    wedge_angles,
)
from .protocol import PACKET_SPAN_NS, AlohaScheduler, Message, decode_superposition, split_message

CALIBRATION_SCHEMA = 1
ORIGINS = (TxKind.TOP, TxKind.BOTTOM)


class DomainError(ValueError):
    pass


class FitDomainError(RuntimeError):
    pass


class StaleMessage(LookupError):
    pass


@dataclass(frozen=True)
class TimingRecord:
    neighbor_id: int
    revolution_index: int
    t_L: float | None
    t_M: float | None
    t_R: float | None
    origin: TxKind

    @property
    def complete(self) -> bool:
        return self.t_L is not None and self.t_M is not None and self.t_R is not None

    @property
    def has_range(self) -> bool:
        return self.t_L is not None and self.t_R is not None

    @property
    def t_facing(self) -> float:
        return 0.5 * (self.t_L + self.t_R)

    @property
    def last_time(self) -> float:
        return max(t for t in (self.t_L, self.t_M, self.t_R) if t is not None)


@dataclass(frozen=True)
class RelativeMeasurement:
    neighbor_id: int
    r: float
    alpha: float | None
    t_facing: float
    sigma_r: float
    sigma_alpha: float | None
    neighbor_pos: np.ndarray
    origin: TxKind
    peer_sigma: float = 0.0


# ---------------------------------------------------------------- accumulation

def _visit_records(t, src, rx, origin, gap_ns, closed_before=None, boundaries=None):
    """Vectorized core of :func:`accumulate`. Inputs sorted by time."""
    records = []
    consumed = np.zeros(len(t), dtype=bool)
    for s in np.unique(src):
        sel = np.flatnonzero(src == s)
        ts = t[sel]
        visit = np.concatenate(([0], np.cumsum(np.diff(ts) > gap_ns)))
        n_visits = visit[-1] + 1
        last = np.full(n_visits, -np.inf)
        np.maximum.at(last, visit, ts)
        key = (visit * 2 + origin[sel]) * 3 + rx[sel]
        keys, first_idx = np.unique(key, return_index=True)
        n_packets = np.bincount(visit * 2 + origin[sel], minlength=2 * n_visits)
        per_visit: dict[int, dict] = {}
        for kk, fi in zip(keys, first_idx):
            v, rem = divmod(int(kk), 6)
            o, r = divmod(rem, 3)
            per_visit.setdefault(v, {}).setdefault(o, {})[r] = float(ts[fi])
        for v in range(n_visits):
            if closed_before is not None and last[v] + gap_ns > closed_before:
                continue
            consumed[sel[visit == v]] = True
            by_origin = per_visit[v]
            # most receivers wins; ties go to the origin with more packets, then to top
            o = min(by_origin, key=lambda k: (-len(by_origin[k]), -n_packets[2 * v + k], k))
            times = by_origin[o]
            first = min(times.values())
            if boundaries is not None:
                rev = int(np.searchsorted(boundaries, first, side="right") - 1)
            else:
                rev = v
            records.append(TimingRecord(int(s), rev, times.get(0), times.get(1), times.get(2), ORIGINS[o]))
    records.sort(key=lambda r: (r.last_time, r.neighbor_id))
    return records, consumed


def accumulate(receptions, omega: float, boundaries=None, closed_before=None):
    """Per-neighbor, per-visit earliest reception time of each receiver.

    ``receptions`` is an iterable of :class:`~spinsense.channel.ReceptionEvent`.
    A visit ends after half a revolution without packets from that neighbor.
    With ``boundaries`` (sorted ns), a record's revolution index is the
    boundary interval holding its first reception; otherwise visits are
    numbered per neighbor. Visits that could still grow before
    ``closed_before`` are left out.
    """
    rx_index = {"L": 0, "M": 1, "R": 2}
    evs = sorted(receptions, key=lambda e: (e.t_start, e.tx_robot_id))
    if not evs:
        return []
    t = np.array([e.t_start for e in evs], dtype=float)
    src = np.array([e.tx_robot_id for e in evs])
    rx = np.array([rx_index[e.receiver_id.value] for e in evs])
    origin = np.array([0 if e.from_origin is TxKind.TOP else 1 for e in evs])
    gap = math.pi / omega / NS
    records, _ = _visit_records(t, src, rx, origin, gap, closed_before, None if boundaries is None else np.asarray(boundaries, float))
    return records


class VisitTracker:
    """Streaming form of :func:`accumulate` for one receiving robot."""

    def __init__(self):
        self._t: list[float] = []
        self._src: list[int] = []
        self._rx: list[int] = []
        self._origin: list[int] = []

    def add(self, t, src, rx, origin):
        self._t.append(float(t))
        self._src.append(int(src))
        self._rx.append(int(rx))
        self._origin.append(int(origin))

    def __len__(self):
        return len(self._t)

    def close(self, now: float, omega: float) -> list[TimingRecord]:
        """Records for visits that have ended by ``now``; their receptions are dropped."""
        if not self._t:
            return []
        t = np.array(self._t)
        order = np.argsort(t, kind="stable")
        t = t[order]
        src = np.array(self._src)[order]
        rx = np.array(self._rx)[order]
        origin = np.array(self._origin)[order]
        records, consumed = _visit_records(t, src, rx, origin, math.pi / omega / NS, closed_before=now)
        keep = ~consumed
        self._t = t[keep].tolist()
        self._src = src[keep].tolist()
        self._rx = rx[keep].tolist()
        self._origin = origin[keep].tolist()
        return records


# ---------------------------------------------------------------- closed forms

def ideal_relative(t_L, t_M, t_R, omega, R, phi):
    """Range and elevation from arrival times (ns) under ideal planar FOVs.

    ``r = R / sin(w (t_R - t_L) / 2)`` and
    ``tan(alpha) = sin(w (2 t_M - t_R - t_L) / 2) cot(phi)``. ``alpha`` is None
    when ``t_M`` is None.
    """
    half = omega * (t_R - t_L) * NS / 2.0
    if not 0.0 < half < math.pi:
        raise DomainError(f"w(t_R - t_L)/2 = {half} outside (0, pi)")
    r = R / math.sin(half)
    if t_M is None:
        return r, None
    delta = omega * (2.0 * t_M - t_R - t_L) * NS / 2.0
    alpha = math.atan(math.sin(delta) / math.tan(phi))
    return r, alpha


def propagate_uncertainty(r, alpha, omega, R, phi, sigma_t):
    """First-order spread of range, elevation and relative bearing.

    ``sigma_t`` in seconds. Returns ``(sigma_r, sigma_alpha, sigma_theta)``.
    """
    if not sigma_t > 0:
        raise ValueError("sigma_t must be positive")
    wst = omega * sigma_t
    sigma_r = r * r * wst / (math.sqrt(2.0) * R)
    sigma_alpha = None if alpha is None else wst * math.cos(alpha) ** 2 / math.tan(phi)
    return sigma_r, sigma_alpha, math.sqrt(2.0) * wst


def interval_sigma_t(mean_interval_ns: float = 75_000.0) -> float:
    """Timing spread of a pickup uniformly late by up to one mean interval, in seconds."""
    return mean_interval_ns * NS / math.sqrt(12.0)


# ---------------------------------------------------------------- calibration table

@dataclass
class CalibrationTable:
    """Fitted maps from timing to range/elevation and their spreads.

    ``r = r_scale / sin(x/2 + r_offset)`` with ``x = w (t_R - t_L)``;
    ``alpha = atan(alpha_gain * sin(delta + alpha_offset))`` with
    ``delta = w (2 t_M - t_R - t_L) / 2``;
    ``sigma_r = sr_quad r^2 + sr_const``, ``sigma_alpha = sa_cos2 cos^2(alpha) + sa_const``.
    """

    r_scale: float
    r_offset: float
    alpha_gain: float
    alpha_offset: float
    sr_quad: float
    sr_const: float
    sa_cos2: float
    sa_const: float
    x_domain: tuple[float, float] = (0.0, math.pi)
    delta_domain: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    omega: float = 50.0 * math.pi
    residuals: dict = field(default_factory=dict)
    schema_version: int = CALIBRATION_SCHEMA

    def __post_init__(self):
        if self.sr_const <= 0 or self.sa_const <= 0 or self.sr_quad < 0 or self.sa_cos2 < 0:
            raise ValueError("uncertainty fits must be strictly positive")
        self.x_domain = tuple(float(v) for v in self.x_domain)
        self.delta_domain = tuple(float(v) for v in self.delta_domain)

    def distance(self, x):
        arg = np.asarray(x, dtype=float) / 2.0 + self.r_offset
        if np.any(arg <= 0) or np.any(arg > math.pi / 2 + 1e-12):
            raise DomainError("timing difference outside the monotone range of the distance fit")
        out = self.r_scale / np.sin(arg)
        return float(out) if np.ndim(out) == 0 else out

    def elevation(self, delta):
        out = np.arctan(self.alpha_gain * np.sin(np.asarray(delta, dtype=float) + self.alpha_offset))
        return float(out) if np.ndim(out) == 0 else out

    def sigma_r(self, r):
        out = self.sr_quad * np.asarray(r, dtype=float) ** 2 + self.sr_const
        return float(out) if np.ndim(out) == 0 else out

    def sigma_alpha(self, alpha):
        out = self.sa_cos2 * np.cos(np.asarray(alpha, dtype=float)) ** 2 + self.sa_const
        return float(out) if np.ndim(out) == 0 else out

    @classmethod
    def ideal(cls, geometry: RobotGeometry | None = None, omega: float = 50.0 * math.pi, sigma_t: float | None = None):
        """Exact planar-FOV relations with first-order uncertainty."""
        geometry = geometry or default_geometry()
        sigma_t = interval_sigma_t() if sigma_t is None else sigma_t
        R, phi = geometry.side_offset, geometry.tilt
        wst = omega * sigma_t
        return cls(
            r_scale=R, r_offset=0.0, alpha_gain=1.0 / math.tan(phi), alpha_offset=0.0,
            sr_quad=wst / (math.sqrt(2.0) * R), sr_const=1e-6,
            sa_cos2=wst / math.tan(phi), sa_const=1e-6, omega=omega,
        )

    def to_json(self) -> str:
        d = asdict(self)
        d["x_domain"] = list(self.x_domain)
        d["delta_domain"] = list(self.delta_domain)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationTable":
        d = json.loads(text)
        if d.get("schema_version") != CALIBRATION_SCHEMA:
            raise ValueError(f"unsupported calibration schema {d.get('schema_version')}")
        return cls(**d)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        with open(path) as fh:
            return cls.from_json(fh.read())


# ---------------------------------------------------------------- calibration sweep

@dataclass
class SweepConfig:
    geometry: RobotGeometry = field(default_factory=default_geometry)
    channel: ChannelConfig = field(default_factory=lambda: ChannelConfig(max_range=1.0))
    omega: float = 50.0 * math.pi
    r_values: tuple = tuple(np.linspace(0.1, 0.5, 20))
    alpha_values_deg: tuple = tuple(np.linspace(-40.0, 40.0, 20))
    revolutions: int = 50
    seed: int = 0
    ideal: bool = False
    max_residual_r: float = 0.005


def calibration_origin(geometry: RobotGeometry, led_height_below_rx: float, rho: float) -> TxKind:
    """LED cluster whose coverage region includes the receiver."""
    elev = math.atan2(led_height_below_rx, rho)
    top = geometry.transmitter(TxKind.TOP)
    return TxKind.TOP if top.visible_elevation_min <= elev <= top.visible_elevation_max else TxKind.BOTTOM


def simulate_timing_records(
    geometry: RobotGeometry,
    channel: ChannelConfig,
    omega: float,
    robot_pos,
    revolutions: int,
    seed: int = 0,
    origins=ORIGINS,
    source_id: int = 1,
    interval_ns=(50_000, 100_000),
):
    """Static spinning receiver at the origin, one transmitting robot at ``robot_pos``.

    Both LED clusters transmit unless ``origins`` restricts them. Runs ALOHA
    scheduling, the channel gates, loss draws, superposition and decoding,
    then cuts per-visit timing records. Returns ``(records, spin)``.
    """
    robot_pos = np.asarray(robot_pos, dtype=float)
    rng = np.random.default_rng([seed, source_id, 7])
    spin = SpinState(np.zeros(3), omega, 0.0, float(rng.uniform(0, TWO_PI)))
    period = spin.period_ns
    sched = AlohaScheduler(np.random.default_rng([seed, source_id, 0]), *interval_ns, start=int(rng.integers(0, interval_ns[1])))
    t_end = int(round(revolutions * period))
    starts = sched.transmissions_until(t_end)
    packets = split_message(Message(source_id, b"\x00" * 6, "position"))
    bits = np.array([p.to_bits() for p in packets], dtype=np.int64)[np.arange(len(starts)) % len(packets)]
    psi = spin.phase(starts)

    t_all, rx_all, o_all = [], [], []
    for k, rx in enumerate(geometry.ordered_receivers()):
        rrng = receiver_rng(seed, 0, k)
        mask = np.zeros(len(starts), dtype=np.int64)
        for origin in origins:
            tx_spec = geometry.transmitter(origin)
            led_pos = robot_pos + np.array([0.0, 0.0, tx_spec.z_offset])
            if not transmitter_visible(tx_spec, robot_pos, spin.center, channel.max_range):
                continue
            hw = rx.half_width_h
            if channel.crossing_jitter_sigma > 0:
                hw = hw + rrng.normal(0.0, channel.crossing_jitter_sigma, size=len(starts))
            az, el, fwd = wedge_angles(spin.center, psi, rx, led_pos)
            seen = fwd & (np.abs(az) <= hw) & (np.abs(el) <= rx.half_width_v)
            idx = np.flatnonzero(seen)
            kept = idx[rrng.random(len(idx)) >= channel.packet_loss_prob]
            mask[kept] |= ORIGIN_BIT[origin]
        idx = np.flatnonzero(mask)
        if not len(idx):
            continue
        ends = starts[idx] + np.where(mask[idx] & ORIGIN_BIT[TxKind.BOTTOM], PACKET_SPAN_NS[TxKind.BOTTOM], PACKET_SPAN_NS[TxKind.TOP])
        ok = ~collision_flags(starts[idx], ends)
        for i in idx[ok]:
            m = int(mask[i])
            pkt = decode_superposition(int(bits[i]), frozenset(o for o, b in ORIGIN_BIT.items() if m & b))
            if pkt is None:
                continue
            t_all.append(starts[i])
            rx_all.append(k)
            o_all.append(0 if pkt.origin is TxKind.TOP else 1)
    if not t_all:
        return [], spin
    t = np.array(t_all, dtype=float)
    order = np.argsort(t, kind="stable")
    records, _ = _visit_records(
        t[order], np.full(len(t), source_id), np.array(rx_all)[order], np.array(o_all)[order], math.pi / omega / NS
    )
    # drop visits cut by the start/end of the run
    margin = 0.25 * period
    records = [r for r in records if r.has_range and min(x for x in (r.t_L, r.t_M, r.t_R) if x is not None) > margin and r.last_time < t_end - margin]
    return records, spin


def ideal_timing_record(geometry: RobotGeometry, spin: SpinState, led_pos, window, neighbor_id: int = 1, origin=TxKind.TOP, revolution_index: int = 0):
    """Mid-plane crossing times of one visit (continuous timing, zero-width FOV).

    ``window`` should be half a revolution on either side of a facing time.
    """
    times = [mid_plane_crossing_times(spin, geometry.receiver(rid), led_pos, window) for rid in ("L", "M", "R")]
    vals = [float(t[0]) if len(t) else None for t in times]
    return TimingRecord(neighbor_id, revolution_index, vals[0], vals[1], vals[2], origin)


def record_observables(rec: TimingRecord, omega: float):
    """``(x, delta)``: ``w (t_R - t_L)`` and ``w (2 t_M - t_R - t_L) / 2`` in radians."""
    x = omega * (rec.t_R - rec.t_L) * NS
    delta = None if rec.t_M is None else omega * (2.0 * rec.t_M - rec.t_R - rec.t_L) * NS / 2.0
    return x, delta


def _r_model(x, scale, offset):
    return scale / np.sin(x / 2.0 + offset)


def _alpha_model(delta, gain, offset):
    return np.arctan(gain * np.sin(delta + offset))


def calibrate(cfg: SweepConfig | None = None):
    """Sweep a transmitter over a (range, elevation) grid and fit the timing maps.

    Returns ``(table, report)``; ``report`` holds per-grid-point statistics.
    Raises :class:`FitDomainError` when the mean range residual exceeds
    ``cfg.max_residual_r``.
    """
    cfg = cfg or SweepConfig()
    geom, omega = cfg.geometry, cfg.omega
    points = []
    for i, r in enumerate(cfg.r_values):
        for j, a_deg in enumerate(cfg.alpha_values_deg):
            alpha = math.radians(a_deg)
            led = np.array([r, 0.0, r * math.tan(alpha)])
            if cfg.ideal:
                spin = SpinState(np.zeros(3), omega)
                period = spin.period_ns
                recs = [ideal_timing_record(geom, spin, led, (n * period - period / 2, n * period + period / 2)) for n in range(1, 3)]
            else:
                origin = calibration_origin(geom, -led[2], r)
                robot = led - np.array([0.0, 0.0, geom.transmitter(origin).z_offset])
                recs, _ = simulate_timing_records(geom, cfg.channel, omega, robot, cfg.revolutions, seed=cfg.seed + 1000 * i + j, origins=(origin,))
            xs, ds = [], []
            for rec in recs:
                if not rec.has_range:
                    continue
                x, d = record_observables(rec, omega)
                xs.append(x)
                ds.append(np.nan if d is None else d)
            if len(xs) < 2 and not cfg.ideal:
                continue
            points.append((r, alpha, np.array(xs), np.array(ds)))
    if len(points) < 4:
        raise FitDomainError("too few usable grid points")

    r_true = np.array([p[0] for p in points])
    a_true = np.array([p[1] for p in points])
    x_mean = np.array([p[2].mean() for p in points])
    d_mean = np.array([np.nanmean(p[3]) if np.any(np.isfinite(p[3])) else np.nan for p in points])

    R0, phi0 = geom.side_offset, geom.tilt
    (r_scale, r_offset), _ = curve_fit(_r_model, x_mean, r_true, p0=(R0, 0.0), xtol=1e-14, ftol=1e-14, gtol=1e-14)
    good_a = np.isfinite(d_mean)
    (gain, a_offset), _ = curve_fit(_alpha_model, d_mean[good_a], a_true[good_a], p0=(1.0 / math.tan(phi0), 0.0), xtol=1e-14, ftol=1e-14, gtol=1e-14)

    r_hat_mean, r_std, a_hat_mean, a_std = [], [], [], []
    for r, a, xs, ds in points:
        rh = _r_model(xs, r_scale, r_offset)
        r_hat_mean.append(rh.mean())
        r_std.append(rh.std(ddof=1) if len(rh) > 1 else 0.0)
        dd = ds[np.isfinite(ds)]
        ah = _alpha_model(dd, gain, a_offset) if len(dd) else np.array([np.nan])
        a_hat_mean.append(np.nanmean(ah))
        a_std.append(ah.std(ddof=1) if len(ah) > 1 else np.nan)
    r_hat_mean, r_std = np.array(r_hat_mean), np.array(r_std)
    a_hat_mean, a_std = np.array(a_hat_mean), np.array(a_std)

    if cfg.ideal:
        ideal = CalibrationTable.ideal(geom, omega)
        sr = (ideal.sr_quad, ideal.sr_const)
        sa = (ideal.sa_cos2, ideal.sa_const)
    else:
        coef, _ = nnls(np.column_stack([r_true ** 2, np.ones_like(r_true)]), r_std)
        sr = (coef[0], max(coef[1], 1e-4))
        ga = np.isfinite(a_std)
        coef, _ = nnls(np.column_stack([np.cos(a_true[ga]) ** 2, np.ones(ga.sum())]), a_std[ga])
        sa = (coef[0], max(coef[1], 1e-4))

    r_res = r_hat_mean - r_true
    a_res = a_hat_mean - a_true
    residuals = {
        "r_rms": float(np.sqrt(np.mean(r_res ** 2))),
        "r_max": float(np.max(np.abs(r_res))),
        "alpha_rms": float(np.sqrt(np.nanmean(a_res ** 2))),
        "n_points": int(len(points)),
    }
    all_x = np.concatenate([p[2] for p in points])
    all_d = np.concatenate([p[3] for p in points])
    all_d = all_d[np.isfinite(all_d)]
    table = CalibrationTable(
        r_scale=float(r_scale), r_offset=float(r_offset), alpha_gain=float(gain), alpha_offset=float(a_offset),
        sr_quad=float(sr[0]), sr_const=float(sr[1]), sa_cos2=float(sa[0]), sa_const=float(sa[1]),
        x_domain=(float(all_x.min()), float(all_x.max())),
        delta_domain=(float(all_d.min()), float(all_d.max())) if len(all_d) else (-math.pi / 2, math.pi / 2),
        omega=omega, residuals=residuals,
    )
    xs_grid = np.linspace(*table.x_domain, 64)
    if not np.all(np.diff(table.distance(xs_grid)) < 0):
        raise FitDomainError("fitted distance map is not decreasing over its domain")
    if residuals["r_rms"] > cfg.max_residual_r:
        raise FitDomainError(f"range residual RMS {residuals['r_rms']:.4f} m exceeds {cfg.max_residual_r} m")
    report = {
        "r_true": r_true, "alpha_true": a_true, "x_mean": x_mean, "delta_mean": d_mean,
        "r_hat_mean": r_hat_mean, "r_std": r_std, "alpha_hat_mean": a_hat_mean, "alpha_std": a_std,
        "residuals": residuals,
    }
    return table, report


# ---------------------------------------------------------------- measurements

@dataclass
class NeighborInfo:
    """Latest decoded position message of a neighbor."""

    position: np.ndarray
    received_at: float
    sigma_xy: float = 0.0


def to_measurement(rec: TimingRecord, cal: CalibrationTable, omega: float, neighbor: NeighborInfo | None,
                   sender_geometry: RobotGeometry | None = None, now: float | None = None,
                   horizon_ns: float | None = None) -> RelativeMeasurement:
    """Calibrated range/elevation plus the neighbor's LED position.

    ``horizon_ns`` defaults to three revolutions at ``omega``.
    """
    if not rec.has_range:
        raise DomainError("record lacks left/right timing")
    now = rec.last_time if now is None else now
    horizon_ns = 3 * TWO_PI / omega / NS if horizon_ns is None else horizon_ns
    if neighbor is None or now - neighbor.received_at > horizon_ns:
        raise StaleMessage(f"no fresh position from neighbor {rec.neighbor_id}")
    sender_geometry = sender_geometry or default_geometry()
    x, delta = record_observables(rec, omega)
    r = cal.distance(x)
    alpha = None if delta is None else cal.elevation(delta)
    pos = np.asarray(neighbor.position, dtype=float) + np.array([0.0, 0.0, sender_geometry.transmitter(rec.origin).z_offset])
    return RelativeMeasurement(
        neighbor_id=rec.neighbor_id, r=r, alpha=alpha, t_facing=rec.t_facing,
        sigma_r=cal.sigma_r(r), sigma_alpha=None if alpha is None else cal.sigma_alpha(alpha),
        neighbor_pos=pos, origin=rec.origin, peer_sigma=neighbor.sigma_xy,
    )
