"""Deterministic scenario runner: beacons, spinning drones, optical channel, solver, controller.

Time advances in controller blocks (10 ms by default). Within a block the
point-mass physics is integrated at 1 kHz from the command computed at the
block start, which fixes every robot's trajectory for the block; the channel
is then evaluated for all packets starting in the block, and each drone runs
its solver at every wrap of its own spin phase using only receptions that
started before the solve time.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .channel import (
    ORIGIN_BIT,
    ChannelConfig,
    LossCause,
    StreamingResolver,
    loss_row,
    reception_row,
    receiver_rng,
)
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
from .localization import (
    FacingObservation,
    Localizer,
    LocalizationError,
    NoPairedObservations,
    PositionEstimate,
    SolverConfig,
    estimate_omega,
)
from .protocol import (
    POSITION_MESSAGE_BYTES,
    POSITION_REPORT_BYTES,
    LED_ON_NS,
    AlohaScheduler,
    Message,
    MessageAssembler,
    decode_position,
    decode_position_report,
    encode_position,
    encode_position_report,
    split_message,
)
from .sensing import (
    CalibrationTable,
    DomainError,
    NeighborInfo,
    StaleMessage,
    TimingRecord,
    VisitTracker,
    to_measurement,
)

log = logging.getLogger(__name__)

SCENARIO_SCHEMA = 1
TRUTH_COLUMNS = ("time_ns", "robot", "x", "y", "z", "phase", "omega")
ESTIMATE_COLUMNS = ("time_ns", "robot", "variant", "s_x", "s_y", "s_z", "sigma_xy", "omega", "n_neighbors")
ROLES = ("beacon", "drone")
MAX_ROBOT_ID = 63


class ConfigError(ValueError):
    """Invalid scenario; ``line`` points into the source text when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class VariantConfig:
    name: str = "primary"
    exclude: tuple = ()


@dataclass(frozen=True)
class RobotConfig:
    id: int
    role: str
    position: tuple
    spin_hz: float | None = None
    geometry: dict = field(default_factory=dict)
    hears: tuple | None = None
    waypoints: tuple = ()
    variants: tuple = (VariantConfig(),)
    transmit: bool = True

    def build_geometry(self) -> RobotGeometry:
        return default_geometry(**self.geometry)


@dataclass(frozen=True)
class ControllerConfig:
    kp: float = 4.0
    ki: float = 0.5
    kd: float = 3.0
    max_accel: float = 3.0
    velocity_tau: float = 0.05
    integral_limit: float = 0.05
    dropout_tau: float = 0.2
    disturbance_accel: float = 0.0
    disturbance_tau: float = 0.5
    rate_hz: float = 100.0
    physics_hz: float = 1000.0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    duration: float
    robots: tuple
    seed: int = 0
    spin_hz: float = 25.0
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    omega_drift: float = 0.001
    warmup: float = 2.0
    ideal_channel: bool = False
    calibration: str | None = None
    schema_version: int = SCENARIO_SCHEMA

    def robot(self, rid: int) -> RobotConfig:
        for r in self.robots:
            if r.id == rid:
                return r
        raise KeyError(rid)

    @property
    def drone_ids(self) -> list[int]:
        return [r.id for r in self.robots if r.role == "drone"]

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=int(seed), channel=replace(self.channel, seed=int(seed)))

    def to_dict(self) -> dict:
        def robot(r: RobotConfig):
            d = {"id": r.id, "role": r.role, "position": list(r.position)}
            if r.spin_hz is not None:
                d["spin_hz"] = r.spin_hz
            if r.geometry:
                d["geometry"] = dict(r.geometry)
            if r.hears is not None:
                d["hears"] = list(r.hears)
            if r.waypoints:
                d["waypoints"] = [[t, list(p)] for t, p in r.waypoints]
            if r.role == "drone":
                d["variants"] = [{"name": v.name, "exclude": list(v.exclude)} for v in r.variants]
            if not r.transmit:
                d["transmit"] = False
            return d

        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "duration": self.duration,
            "seed": self.seed,
            "spin_hz": self.spin_hz,
            "omega_drift": self.omega_drift,
            "warmup": self.warmup,
            "ideal_channel": self.ideal_channel,
            "calibration": self.calibration,
            "channel": {k: getattr(self.channel, k) for k in ("max_range", "packet_loss_prob", "crossing_jitter_sigma", "jitter_tol_ns")},
            "solver": {k: getattr(self.solver, k) for k in ("max_iters", "step_init", "convergence_tol", "sigma_t", "filter_tau", "min_neighbors_xy")},
            "controller": dict(self.controller.__dict__),
            "robots": [robot(r) for r in self.robots],
        }


def _line_of(text: str | None, pattern: str, occurrence: int = 0) -> int | None:
    if text is None:
        return None
    hits = [m.start() for m in re.finditer(pattern, text)]
    if len(hits) <= occurrence:
        return None
    return text.count("\n", 0, hits[occurrence]) + 1


def _vec3(value, what, text, key_pattern):
    try:
        v = tuple(float(x) for x in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a list of three numbers", _line_of(text, key_pattern)) from None
    if len(v) != 3 or not all(math.isfinite(x) for x in v):
        raise ConfigError(f"{what} must be a list of three finite numbers", _line_of(text, key_pattern))
    return v


def _pick(section: dict, allowed: set, where: str, text):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}", _line_of(text, rf'"{re.escape(unknown[0])}"\s*:'))
    return section


def scenario_from_dict(d: dict, text: str | None = None) -> ScenarioConfig:
    """Build and validate a scenario; ``text`` (the JSON source) anchors error lines."""
    if not isinstance(d, dict):
        raise ConfigError("scenario must be a JSON object", 1)
    top_keys = {"schema_version", "name", "duration", "seed", "spin_hz", "omega_drift", "warmup", "ideal_channel",
                "calibration", "channel", "solver", "controller", "robots", "description"}
    _pick(d, top_keys, "scenario", text)
    version = d.get("schema_version", SCENARIO_SCHEMA)
    if version != SCENARIO_SCHEMA:
        raise ConfigError(f"unsupported schema_version {version}", _line_of(text, r'"schema_version"'))
    if "robots" not in d or not isinstance(d["robots"], list) or not d["robots"]:
        raise ConfigError("scenario needs a non-empty 'robots' list", _line_of(text, r'"robots"'))
    seed = int(d.get("seed", 0))
    try:
        channel = ChannelConfig(seed=seed, **_pick(d.get("channel", {}), {"max_range", "packet_loss_prob", "crossing_jitter_sigma", "jitter_tol_ns"}, "channel", text))
        solver = SolverConfig(**_pick(d.get("solver", {}), {"max_iters", "step_init", "convergence_tol", "sigma_t", "filter_tau", "min_neighbors_xy"}, "solver", text))
        controller = ControllerConfig(**_pick(d.get("controller", {}), set(ControllerConfig.__dataclass_fields__), "controller", text))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None

    robots = []
    seen: dict[int, int] = {}
    for i, rd in enumerate(d["robots"]):
        if not isinstance(rd, dict) or "id" not in rd:
            raise ConfigError(f"robot entry {i} needs an 'id'", _line_of(text, r'"robots"'))
        _pick(rd, {"id", "role", "position", "spin_hz", "geometry", "hears", "waypoints", "variants", "transmit"}, f"robot {rd.get('id')}", text)
        rid = rd["id"]
        id_pat = rf'"id"\s*:\s*{re.escape(str(rid))}\b'
        if not isinstance(rid, int) or not 0 <= rid <= MAX_ROBOT_ID:
            raise ConfigError(f"robot id {rid!r} must be an integer in [0, {MAX_ROBOT_ID}]", _line_of(text, id_pat))
        if rid in seen:
            raise ConfigError(f"duplicate robot id {rid}", _line_of(text, id_pat, seen[rid]))
        seen[rid] = 1
        role = rd.get("role")
        if role not in ROLES:
            raise ConfigError(f"robot {rid}: role must be one of {ROLES}, got {role!r}", _line_of(text, id_pat))
        pos = _vec3(rd.get("position"), f"robot {rid} position", text, id_pat)
        if max(abs(c) for c in pos) >= 32.0:
            raise ConfigError(f"robot {rid} position outside the encodable range", _line_of(text, id_pat))
        waypoints = []
        for w in rd.get("waypoints", []):
            if not isinstance(w, (list, tuple)) or len(w) != 2:
                raise ConfigError(f"robot {rid}: waypoints are [t, [x, y, z]] pairs", _line_of(text, r'"waypoints"'))
            waypoints.append((float(w[0]), _vec3(w[1], f"robot {rid} waypoint", text, r'"waypoints"')))
        if any(b[0] < a[0] for a, b in zip(waypoints, waypoints[1:])):
            raise ConfigError(f"robot {rid}: waypoint times must be non-decreasing", _line_of(text, r'"waypoints"'))
        variants = tuple(VariantConfig(v.get("name", "primary"), tuple(int(x) for x in v.get("exclude", []))) for v in rd.get("variants", [{}]))
        if len({v.name for v in variants}) != len(variants):
            raise ConfigError(f"robot {rid}: duplicate variant names", _line_of(text, r'"variants"'))
        try:
            geometry = dict(rd.get("geometry", {}))
            default_geometry(**geometry)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"robot {rid} geometry: {exc}", _line_of(text, id_pat)) from None
        hears = rd.get("hears")
        robots.append(RobotConfig(
            id=rid, role=role, position=pos, spin_hz=rd.get("spin_hz"), geometry=geometry,
            hears=None if hears is None else tuple(int(h) for h in hears), waypoints=tuple(waypoints),
            variants=variants, transmit=bool(rd.get("transmit", True)),
        ))
    ids = set(seen)
    for r in robots:
        for ref in list(r.hears or ()) + [x for v in r.variants for x in v.exclude]:
            if ref not in ids:
                raise ConfigError(f"robot {r.id} references unknown robot id {ref}", _line_of(text, rf'"id"\s*:\s*{r.id}\b'))
    duration = float(d.get("duration", 0))
    if not duration > 0:
        raise ConfigError("duration must be positive", _line_of(text, r'"duration"'))
    spin_hz = float(d.get("spin_hz", 25.0))
    if not spin_hz > 0:
        raise ConfigError("spin_hz must be positive", _line_of(text, r'"spin_hz"'))
    return ScenarioConfig(
        name=str(d.get("name", "scenario")), duration=duration, robots=tuple(robots), seed=seed, spin_hz=spin_hz,
        channel=channel, solver=solver, controller=controller, omega_drift=float(d.get("omega_drift", 0.001)),
        warmup=float(d.get("warmup", 2.0)), ideal_channel=bool(d.get("ideal_channel", False)),
        calibration=d.get("calibration"), schema_version=version,
    )


def load_scenario(path) -> ScenarioConfig:
    text = Path(path).read_text()
    return parse_scenario(text)


def parse_scenario(text: str) -> ScenarioConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    return scenario_from_dict(d, text)


def shipped_scenario(name: str) -> ScenarioConfig:
    """One of the bundled scenarios: hold, horizontal, vertical, p2p, hold_two_beacons."""
    text = resources.files("spinsense").joinpath("scenarios", f"{name}.json").read_text()
    return parse_scenario(text)


def shipped_scenario_path(name: str) -> Path:
    return Path(str(resources.files("spinsense").joinpath("scenarios", f"{name}.json")))


def default_calibration() -> CalibrationTable:
    return CalibrationTable.from_json(resources.files("spinsense").joinpath("data", "calibration_default.json").read_text())


# ---------------------------------------------------------------- dynamics

@dataclass
class DroneDynamics:
    position: np.ndarray
    velocity: np.ndarray
    spin: SpinState
    gains: ControllerConfig = field(default_factory=ControllerConfig)
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity_estimate: np.ndarray = field(default_factory=lambda: np.zeros(3))
    last_estimate: np.ndarray | None = None
    last_estimate_time: float | None = None
    command: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def max_accel(self) -> float:
        return self.gains.max_accel


def clamp_norm(a, limit: float) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    n = float(np.linalg.norm(a))
    return a * (limit / n) if n > limit else a


def observe_estimate(d: DroneDynamics, position, t: float) -> None:
    """Update the low-passed finite-difference velocity from a new filtered estimate (``t`` in s)."""
    position = np.asarray(position, dtype=float)
    if d.last_estimate is not None and t > d.last_estimate_time:
        dt = t - d.last_estimate_time
        raw = (position - d.last_estimate) / dt
        k = 1.0 - math.exp(-dt / d.gains.velocity_tau)
        d.velocity_estimate = d.velocity_estimate + k * (raw - d.velocity_estimate)
    d.last_estimate = position.copy()
    d.last_estimate_time = t


def control_update(d: DroneDynamics, est: PositionEstimate | None, target, dt: float) -> np.ndarray:
    """Per-axis PID toward ``target``; ``est`` None means dropout.

    The derivative acts on the filtered velocity estimate. During a dropout the
    last command decays toward zero with the configured time constant.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    g = d.gains
    if est is None:
        d.command = d.command * math.exp(-dt / g.dropout_tau)
        return d.command
    err = np.asarray(target, dtype=float) - est.s
    d.integral = np.clip(d.integral + err * dt, -g.integral_limit, g.integral_limit)
    a = g.kp * err + g.ki * d.integral - g.kd * d.velocity_estimate
    d.command = clamp_norm(a, g.max_accel)
    return d.command


def step_kinematics(d: DroneDynamics, accel, dt: float, omega: float | None = None) -> DroneDynamics:
    """Semi-implicit Euler step (``dt`` in s); the spin advances at its current rate.

    ``omega`` switches the spin rate from the end of the step on.
    """
    if not 0 < dt <= 0.002:
        raise ValueError("dt must lie in (0, 2 ms]")
    accel = np.asarray(accel, dtype=float)
    d.velocity = d.velocity + accel * dt
    d.position = d.position + d.velocity * dt
    t_end = d.spin.phase_ref_time + dt / NS
    d.spin = replace(d.spin, center=d.position.copy(), phase_ref_time=t_end,
                     phase_at_ref=float(d.spin.phase_at_ref + d.spin.omega * dt) % TWO_PI,
                     omega=d.spin.omega if omega is None else omega)
    return d


def target_at(waypoints, t: float, default) -> np.ndarray:
    """Piecewise-linear waypoint path, held constant outside its span."""
    if not waypoints:
        return np.asarray(default, dtype=float)
    ts = np.array([w[0] for w in waypoints])
    ps = np.array([w[1] for w in waypoints], dtype=float)
    return np.array([np.interp(t, ts, ps[:, k]) for k in range(3)])


# ---------------------------------------------------------------- run log

@dataclass
class RunLog:
    config: ScenarioConfig
    truth: dict
    estimates: list
    channel_rows: list
    counts: dict
    tx_stats: dict
    dropouts: list = field(default_factory=list)

    def truth_of(self, robot: int) -> dict:
        sel = self.truth["robot"] == robot
        return {k: v[sel] for k, v in self.truth.items()}

    def estimates_of(self, robot: int, variant: str = "primary") -> dict:
        rows = [r for r in self.estimates if r[1] == robot and r[2] == variant]
        cols = list(zip(*rows)) if rows else [[] for _ in ESTIMATE_COLUMNS]
        out = {}
        for name, vals in zip(ESTIMATE_COLUMNS, cols):
            if name == "variant":
                out[name] = np.array(vals, dtype=object)
            elif name in ("time_ns", "robot", "n_neighbors"):
                out[name] = np.array(vals, dtype=np.int64)
            else:
                out[name] = np.array(vals, dtype=float)
        return out


# ---------------------------------------------------------------- engine internals

class _Robot:
    def __init__(self, cfg: RobotConfig, scenario: ScenarioConfig, calibration: CalibrationTable | None):
        self.cfg = cfg
        self.id = cfg.id
        self.is_drone = cfg.role == "drone"
        self.geometry = cfg.build_geometry()
        seed = scenario.seed
        self.omega_nominal = TWO_PI * (cfg.spin_hz or scenario.spin_hz)
        start_rng = np.random.default_rng([seed, cfg.id, 4])
        phase0 = float(start_rng.uniform(0.0, TWO_PI))
        pos = np.array(cfg.position, dtype=float)
        self.dyn = DroneDynamics(pos, np.zeros(3), SpinState(pos, self.omega_nominal, 0.0, phase0), scenario.controller)
        self.scheduler = AlohaScheduler(np.random.default_rng([seed, cfg.id, 0]), start=int(start_rng.integers(0, 100_000)))
        self.drift_rng = np.random.default_rng([seed, cfg.id, 2])
        self.dist_rng = np.random.default_rng([seed, cfg.id, 3])
        self.drift_state = 0.0
        self.disturbance = np.zeros(3)
        self.hears = None if cfg.hears is None else frozenset(cfg.hears)
        # message cycling
        self.msg_len = POSITION_REPORT_BYTES if self.is_drone else POSITION_MESSAGE_BYTES
        self.n_packets = math.ceil(self.msg_len / 2)
        self.tx_counter = 0
        self.cycle_bits: np.ndarray | None = None
        self.cycle_id = -1
        self.report: tuple | None = None if self.is_drone else (pos.copy(), 0.0)
        # receiving side
        if self.is_drone:
            self.resolvers = [StreamingResolver(cfg.id, rx.id) for rx in self.geometry.ordered_receivers()]
            self.rx_rngs = [receiver_rng(scenario.channel.seed, cfg.id, k) for k in range(3)]
            self.pending: list = []
            self.tracker = VisitTracker()
            self.assemblers: dict[int, MessageAssembler] = {}
            self.neighbors: dict[int, NeighborInfo] = {}
            self.history: dict[int, list[TimingRecord]] = {}
            self.localizers = {v.name: Localizer(scenario.solver) for v in cfg.variants}
            self.primary = cfg.variants[0].name
            self.omega_est = self.omega_nominal
            self.estimate: PositionEstimate | None = None
            self.fresh_estimate = False
            self.dropout = False
            self.calibration = calibration
        self.block_t = None
        self.block_pos = None

    def allows(self, tx: int) -> bool:
        return self.hears is None or tx in self.hears

    def positions_at(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.block_t, self.block_pos[:, k]) for k in range(3)], axis=-1)

    def packet_bits(self, n: int) -> np.ndarray:
        """Wire bits for the next ``n`` transmissions; message content changes only between cycles."""
        idx = self.tx_counter + np.arange(n)
        cycle = idx // self.n_packets
        new_bits = self._encode_current()
        bits = new_bits[idx % self.n_packets]
        if self.cycle_bits is not None:
            same = cycle == self.cycle_id
            bits = np.where(same, self.cycle_bits[idx % self.n_packets], bits)
        if n:
            last_cycle = int(cycle[-1])
            if last_cycle != self.cycle_id:
                self.cycle_bits = new_bits
                self.cycle_id = last_cycle
        self.tx_counter += n
        return bits

    def _encode_current(self) -> np.ndarray:
        pos, sigma = self.report
        data = encode_position_report(pos, sigma) if self.is_drone else encode_position(pos)
        return np.array([p.to_bits() for p in split_message(Message(self.id, data))], dtype=np.int64)


def _wrap_times(spin: SpinState, t0: float, t1: float) -> list[float]:
    """Times in ``[t0, t1)`` where the spin phase wraps through zero."""
    p0 = float(spin.phase(t0))
    first = t0 + ((TWO_PI - p0) % TWO_PI) / spin.omega / NS
    period = spin.period_ns
    out = []
    t = first
    while t < t1:
        out.append(t)
        t += period
    return out


def _ideal_record(geometry: RobotGeometry, spin: SpinState, led, t_s: float, nid: int, origin: TxKind) -> TimingRecord | None:
    period = spin.period_ns
    window = (t_s - 2.5 * period, t_s)
    L = mid_plane_crossing_times(spin, geometry.receiver("L"), led, window)
    M = mid_plane_crossing_times(spin, geometry.receiver("M"), led, window)
    R = mid_plane_crossing_times(spin, geometry.receiver("R"), led, window)
    R = R[R < t_s]
    if not len(R):
        return None
    t_R = float(R[-1])
    L = L[L < t_R]
    if not len(L) or t_R - L[-1] > period:
        return None
    t_L = float(L[-1])
    M = M[(M >= t_L) & (M <= t_R)]
    t_M = float(M[-1]) if len(M) else None
    return TimingRecord(nid, 0, t_L, t_M, t_R, origin)


class Engine:
    """Stateful runner; :func:`run_scenario` is the usual entry point."""

    def __init__(self, cfg: ScenarioConfig, calibration: CalibrationTable | None = None):
        self.cfg = cfg
        if cfg.ideal_channel:
            cfg = replace(cfg, omega_drift=0.0, controller=replace(cfg.controller, disturbance_accel=0.0))
            self.cfg = cfg
        self.block_ns = int(round(1e9 / cfg.controller.rate_hz))
        self.sub_steps = int(round(cfg.controller.physics_hz / cfg.controller.rate_hz))
        self.robots = {r.id: None for r in cfg.robots}
        for rc in sorted(cfg.robots, key=lambda r: r.id):
            cal = calibration
            if rc.role == "drone" and cal is None:
                omega = TWO_PI * (rc.spin_hz or cfg.spin_hz)
                if cfg.ideal_channel:
                    cal = CalibrationTable.ideal(rc.build_geometry(), omega)
                elif cfg.calibration:
                    cal = CalibrationTable.load(cfg.calibration)
                else:
                    cal = default_calibration()
            self.robots[rc.id] = _Robot(rc, cfg, cal)
        self.order = sorted(self.robots)
        self.roles = {r.id: r.role for r in cfg.robots}
        self.truth_rows: list[np.ndarray] = []
        self.estimates: list[tuple] = []
        self.channel_rows: list[tuple] = []
        # (time_ns, robot, variant, error name) for every failed solve
        self.dropouts: list[tuple] = []
        self.counts = {"transmissions": 0, "decoded": 0, "collisions": 0, "decode_errors": 0, "random_losses": 0,
                       "solves": 0, "dropouts": 0, "stale_messages": 0, "omega_violations": 0, "position_violations": 0}
        self.tx_stats = {"transmitted": {rid: 0 for rid in self.order}, "led_on_ns": {rid: 0 for rid in self.order},
                         "per_receiver": {}}

    # -- physics -------------------------------------------------------------
    def _integrate_block(self, t0: int):
        cc = self.cfg.controller
        dt = 1.0 / cc.physics_hz
        for rid in self.order:
            rb = self.robots[rid]
            d = rb.dyn
            times = [t0]
            pos = [d.position.copy()]
            if rb.is_drone:
                if self.cfg.omega_drift > 0:
                    # mean-reverting fractional rate offset; the per-revolution spread is omega_drift
                    revs = self.block_ns * NS * rb.omega_nominal / TWO_PI
                    rb.drift_state = (1 - 0.01 * revs) * rb.drift_state + self.cfg.omega_drift * math.sqrt(revs) * rb.drift_rng.standard_normal()
                omega = rb.omega_nominal * (1.0 + rb.drift_state)
                d.spin = d.spin.advanced(t0, omega)
                for k in range(self.sub_steps):
                    a = d.command.copy()
                    if cc.disturbance_accel > 0:
                        kk = math.exp(-dt / cc.disturbance_tau)
                        rb.disturbance = kk * rb.disturbance + cc.disturbance_accel * math.sqrt(1 - kk * kk) * rb.dist_rng.standard_normal(3)
                        a = a + rb.disturbance
                    d.velocity = d.velocity + a * dt
                    d.position = d.position + d.velocity * dt
                    times.append(t0 + (k + 1) * self.block_ns // self.sub_steps)
                    pos.append(d.position.copy())
                d.spin = SpinState(d.position, d.spin.omega, d.spin.phase_ref_time, d.spin.phase_at_ref)
            else:
                times.append(t0 + self.block_ns)
                pos.append(d.position.copy())
            rb.block_t = np.array(times, dtype=float)
            rb.block_pos = np.array(pos)
            if rb.is_drone:
                tt = rb.block_t[:-1]
                ph = rb.dyn.spin.phase(tt)
                truth = np.column_stack([tt, np.full(len(tt), rid), rb.block_pos[:-1], ph, np.full(len(tt), rb.dyn.spin.omega)])
            else:
                tt = t0 + np.arange(self.sub_steps) * (self.block_ns // self.sub_steps)
                truth = np.column_stack([tt, np.full(len(tt), rid), np.tile(rb.dyn.position, (len(tt), 1)), np.zeros(len(tt)), np.zeros(len(tt))])
            self.truth_rows.append(truth)

    # -- channel -------------------------------------------------------------
    def _channel_block(self, t0: int, t1: int):
        ch = self.cfg.channel
        txs = {}
        for rid in self.order:
            rb = self.robots[rid]
            starts = rb.scheduler.transmissions_until(t1)
            if not rb.cfg.transmit or rb.report is None or not len(starts):
                continue
            bits = rb.packet_bits(len(starts))
            txs[rid] = (starts, bits, rb.positions_at(starts))
            self.counts["transmissions"] += len(starts)
            self.tx_stats["transmitted"][rid] += len(starts)
            self.tx_stats["led_on_ns"][rid] += LED_ON_NS[TxKind.TOP] * len(starts)
        for rid in self.order:
            rx_robot = self.robots[rid]
            if not rx_robot.is_drone:
                continue
            senders = [sid for sid in txs if sid != rid and rx_robot.allows(sid)]
            if not senders:
                continue
            starts = np.concatenate([txs[s][0] for s in senders])
            src = np.concatenate([np.full(len(txs[s][0]), s) for s in senders])
            bits = np.concatenate([txs[s][1] for s in senders])
            tx_pos = np.concatenate([txs[s][2] for s in senders])
            n = len(starts)
            rx_pos = rx_robot.positions_at(starts)
            psi = rx_robot.dyn.spin.phase(starts)
            leds, visible = {}, {}
            for origin in (TxKind.TOP, TxKind.BOTTOM):
                specs = [self.robots[s].geometry.transmitter(origin) for s in senders]
                rep = [len(txs[s][0]) for s in senders]
                z_off = np.repeat([sp.z_offset for sp in specs], rep)
                lo = np.repeat([sp.visible_elevation_min for sp in specs], rep)
                hi = np.repeat([sp.visible_elevation_max for sp in specs], rep)
                led = tx_pos.copy()
                led[:, 2] += z_off
                d = rx_pos - led
                horiz = np.hypot(d[:, 0], d[:, 1])
                elev = np.arctan2(d[:, 2], horiz)
                visible[origin] = (np.hypot(horiz, d[:, 2]) <= ch.max_range) & (elev >= lo) & (elev <= hi)
                leds[origin] = led
            for k, rx in enumerate(rx_robot.geometry.ordered_receivers()):
                rng = rx_robot.rx_rngs[k]
                stats = self.tx_stats["per_receiver"].setdefault(f"{rid}:{rx.id.value}", {"transmitted": 0, "logged": 0, "ignored": 0})
                seen_any = np.zeros(n, dtype=bool)
                mask = np.zeros(n, dtype=np.int64)
                for origin in (TxKind.TOP, TxKind.BOTTOM):
                    vis = np.flatnonzero(visible[origin])
                    hw = rx.half_width_h
                    if ch.crossing_jitter_sigma > 0:
                        hw = hw + rng.normal(0.0, ch.crossing_jitter_sigma, size=len(vis))
                    az, el, fwd = wedge_angles(rx_pos[vis], psi[vis], rx, leds[origin][vis])
                    idx = vis[fwd & (np.abs(az) <= hw) & (np.abs(el) <= rx.half_width_v)]
                    kept = idx[rng.random(len(idx)) >= ch.packet_loss_prob]
                    seen_any[idx] = True
                    mask[kept] |= ORIGIN_BIT[origin]
                n_seen = int(seen_any.sum())
                stats["transmitted"] += n
                stats["logged"] += n_seen
                stats["ignored"] += n - n_seen
                lost = np.flatnonzero(seen_any & (mask == 0))
                for i in lost:
                    self.channel_rows.append((int(starts[i]), rid, rx.id.value, int(src[i]), "", "lost", LossCause.RANDOM))
                self.counts["random_losses"] += len(lost)
                live = np.flatnonzero(mask)
                if len(live):
                    rx_robot.resolvers[k].push(starts[live], src[live], bits[live], mask[live])
                receptions, losses = rx_robot.resolvers[k].flush(t1)
                for ev in receptions:
                    self.channel_rows.append(reception_row(ev))
                    rx_robot.pending.append((ev.t_start, k, ev.tx_robot_id, ev.from_origin, ev.packet))
                for lr in losses:
                    self.channel_rows.append(loss_row(lr))
                    if lr.cause == LossCause.COLLISION:
                        self.counts["collisions"] += 1
                    else:
                        self.counts["decode_errors"] += 1
                self.counts["decoded"] += len(receptions)

    # -- sensing and solving -------------------------------------------------
    def _ingest(self, rb: _Robot, t_s: float):
        if not rb.pending:
            return
        rb.pending.sort(key=lambda e: (e[0], e[1], e[2]))
        cut = 0
        while cut < len(rb.pending) and rb.pending[cut][0] < t_s:
            cut += 1
        for t, k, sid, origin, pkt in rb.pending[:cut]:
            rb.tracker.add(t, sid, k, 0 if origin is TxKind.TOP else 1)
            last = rb.neighbors.get(sid)
            asm = rb.assemblers.get(sid)
            if last is not None and asm is not None and asm.holds(pkt):
                # same content as the message already decoded: only refresh its age
                rb.neighbors[sid] = replace(last, received_at=float(t))
                continue
            if asm is None:
                length = POSITION_REPORT_BYTES if self.roles[sid] == "drone" else POSITION_MESSAGE_BYTES
                asm = rb.assemblers[sid] = MessageAssembler(length)
            msg = asm.add(pkt)
            if msg is not None:
                if self.roles[sid] == "drone":
                    pos, sigma = decode_position_report(msg.data)
                else:
                    pos, sigma = decode_position(msg.data), 0.0
                rb.neighbors[sid] = NeighborInfo(pos, float(t), sigma)
        del rb.pending[:cut]

    def _ideal_records(self, rb: _Robot, t_s: float) -> list[TimingRecord]:
        out = []
        rx_pos = rb.positions_at(t_s)
        spin = SpinState(rx_pos, rb.dyn.spin.omega, rb.dyn.spin.phase_ref_time, rb.dyn.spin.phase_at_ref)
        for sid in self.order:
            other = self.robots[sid]
            if sid == rb.id or not rb.allows(sid) or other.report is None:
                continue
            tx_pos = other.positions_at(t_s)
            for origin in (TxKind.TOP, TxKind.BOTTOM):
                spec = other.geometry.transmitter(origin)
                if transmitter_visible(spec, tx_pos, rx_pos, self.cfg.channel.max_range):
                    rec = _ideal_record(rb.geometry, spin, tx_pos + np.array([0, 0, spec.z_offset]), t_s, sid, origin)
                    if rec is not None:
                        out.append(rec)
                        pos, sigma = other.report
                        rb.neighbors[sid] = NeighborInfo(np.array(pos, dtype=float), t_s, sigma)
                    break
        return out

    def _solve(self, rb: _Robot, t_s: float):
        period = TWO_PI / rb.omega_est / NS
        if self.cfg.ideal_channel:
            records = self._ideal_records(rb, t_s)
        else:
            self._ingest(rb, t_s)
            records = rb.tracker.close(t_s, rb.omega_est)
        fresh = {}
        for rec in records:
            hist = rb.history.setdefault(rec.neighbor_id, [])
            if rec.has_range:
                hist.append(rec)
                del hist[:-2]
                fresh[rec.neighbor_id] = rec
        pairs = []
        obs_inputs = []
        for nid in sorted(fresh):
            rec = fresh[nid]
            hist = rb.history[nid]
            t_prev = None
            if len(hist) == 2:
                gap = rec.t_facing - hist[0].t_facing
                if 0.5 * period < gap < 1.5 * period:
                    t_prev = hist[0].t_facing
                    pairs.append(FacingObservation(nid, rec.t_facing, 1.0, 1.0, np.zeros(3), t_prev))
            obs_inputs.append((rec, t_prev))
        try:
            omega = estimate_omega(pairs)
            if abs(omega / rb.omega_nominal - 1.0) < 0.2:
                rb.omega_est = omega
        except NoPairedObservations:
            pass
        observations = []
        for rec, t_prev in obs_inputs:
            try:
                m = to_measurement(rec, rb.calibration, rb.omega_est, rb.neighbors.get(rec.neighbor_id),
                                   self.robots[rec.neighbor_id].geometry, now=t_s)
            except StaleMessage:
                self.counts["stale_messages"] += 1
                continue
            except DomainError:
                continue
            observations.append(FacingObservation.from_measurement(m, t_prev))
        for v in rb.cfg.variants:
            loc = rb.localizers[v.name]
            obs = [o for o in observations if o.neighbor_id not in v.exclude]
            self.counts["solves"] += 1
            try:
                est = loc.update(obs, rb.omega_est, t_s)
            except LocalizationError as exc:
                self.counts["dropouts"] += 1
                self.dropouts.append((int(round(t_s)), rb.id, v.name, type(exc).__name__))
                if v.name == rb.primary:
                    rb.dropout = True
                continue
            self.estimates.append((int(round(t_s)), rb.id, v.name, float(est.s[0]), float(est.s[1]), float(est.s[2]),
                                   float(est.sigma_xy), float(est.omega), int(est.n_neighbors)))
            if v.name == rb.primary:
                rb.estimate = est
                rb.dropout = False
                rb.fresh_estimate = True
                rb.report = (est.s.copy(), est.sigma_xy)
                observe_estimate(rb.dyn, est.s, t_s * NS)

    # -- main loop -----------------------------------------------------------
    def run(self) -> RunLog:
        cfg = self.cfg
        t_end = int(round(cfg.duration * 1e9))
        dt_ctrl = 1.0 / cfg.controller.rate_hz
        t0 = 0
        while t0 < t_end:
            t1 = min(t0 + self.block_ns, t_end)
            self._integrate_block(t0)
            if not cfg.ideal_channel:
                self._channel_block(t0, t1)
            for rid in self.order:
                rb = self.robots[rid]
                if not rb.is_drone:
                    continue
                for t_s in _wrap_times(rb.dyn.spin, t0, t1):
                    self._solve(rb, t_s)
            for rid in self.order:
                rb = self.robots[rid]
                if not rb.is_drone:
                    continue
                target = target_at(rb.cfg.waypoints, t1 * NS, rb.cfg.position)
                if rb.estimate is None:
                    rb.dyn.command = np.zeros(3)
                elif rb.dropout:
                    control_update(rb.dyn, None, target, dt_ctrl)
                else:
                    control_update(rb.dyn, rb.estimate, target, dt_ctrl)
            t0 = t1
        for rid in self.order:
            rb = self.robots[rid]
            if rb.is_drone:
                for loc in rb.localizers.values():
                    self.counts["omega_violations"] += loc.monitor.omega_violations
                    self.counts["position_violations"] += loc.monitor.position_violations
        truth = np.concatenate(self.truth_rows) if self.truth_rows else np.empty((0, 7))
        order = np.lexsort((truth[:, 1], truth[:, 0]))
        truth = truth[order]
        truth_cols = {
            "time_ns": truth[:, 0].astype(np.int64), "robot": truth[:, 1].astype(np.int64),
            "x": truth[:, 2], "y": truth[:, 3], "z": truth[:, 4], "phase": truth[:, 5], "omega": truth[:, 6],
        }
        self.channel_rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
        return RunLog(cfg, truth_cols, self.estimates, self.channel_rows, self.counts, self.tx_stats, self.dropouts)


def run_scenario(cfg: ScenarioConfig, calibration: CalibrationTable | None = None) -> RunLog:
    """Run one scenario to completion; fully determined by ``cfg`` (including its seed)."""
    return Engine(cfg, calibration).run()
