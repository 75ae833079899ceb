"""Global position from facing times and ranges to neighbors with known positions.

Three steps per revolution: spin rate from the revolution-to-revolution
facing-time differences, horizontal position and heading reference by
weighted nonlinear least squares, then height in closed form from the
elevation angles. Estimates are smoothed by a first-order exponential filter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import NS, TWO_PI, wrap_angle
from .sensing import RelativeMeasurement, interval_sigma_t

log = logging.getLogger(__name__)


class LocalizationError(RuntimeError):
    pass


class Underdetermined(LocalizationError):
    pass


class NoConvergence(LocalizationError):
    pass


class NoPairedObservations(LocalizationError):
    pass


class NoElevationData(LocalizationError):
    pass


class DegenerateWeights(LocalizationError):
    pass


@dataclass(frozen=True)
class FacingObservation:
    neighbor_id: int
    t_i: float
    r: float
    sigma_r: float
    neighbor_pos: np.ndarray
    t_i_prev: float | None = None
    alpha: float | None = None
    sigma_alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "neighbor_pos", np.asarray(self.neighbor_pos, dtype=float).reshape(3))
        if not self.sigma_r > 0 or (self.sigma_alpha is not None and not self.sigma_alpha > 0):
            raise ValueError("observation uncertainties must be positive")

    @classmethod
    def from_measurement(cls, m: RelativeMeasurement, t_prev: float | None = None) -> "FacingObservation":
        """Peer-relayed positions inflate the range spread by the peer's own uncertainty."""
        sigma_r = math.sqrt(m.sigma_r ** 2 + m.peer_sigma ** 2)
        return cls(m.neighbor_id, m.t_facing, m.r, sigma_r, m.neighbor_pos, t_prev, m.alpha, m.sigma_alpha)


@dataclass(frozen=True)
class PositionEstimate:
    s: np.ndarray
    t_x: float
    cov_xy: np.ndarray
    sigma_xy: float
    omega: float
    revolution_index: int = 0
    n_neighbors: int = 0

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float).reshape(3))
        object.__setattr__(self, "cov_xy", np.asarray(self.cov_xy, dtype=float).reshape(2, 2))


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 200
    step_init: float = 1.0
    convergence_tol: float = 1e-7
    sigma_t: float = field(default_factory=interval_sigma_t)
    filter_tau: float = 0.06
    min_neighbors_xy: int = 2

    def __post_init__(self):
        for name in ("max_iters", "step_init", "convergence_tol", "sigma_t", "filter_tau", "min_neighbors_xy"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def estimate_omega(observations) -> float:
    """Mean spin rate from facing-time differences of consecutive revolutions."""
    diffs = [o.t_i - o.t_i_prev for o in observations if o.t_i_prev is not None]
    if not diffs:
        raise NoPairedObservations("no neighbor seen in both of the last two revolutions")
    total = sum(diffs)
    if not total > 0:
        raise NoPairedObservations("facing-time differences are not positive")
    return TWO_PI * len(diffs) / (total * NS)


@dataclass(frozen=True)
class XYSolution:
    s_xy: np.ndarray
    t_x: float
    cov_xy: np.ndarray
    sigma_xy: float
    cost: float
    iterations: int


def _residuals(u, P, t_rel, r, w_r, w_b, omega):
    dx = P[:, 0] - u[0]
    dy = P[:, 1] - u[1]
    d = np.hypot(dx, dy)
    bearing = np.arctan2(dy, dx)
    e_r = (d - r) * w_r
    e_b = wrap_angle(bearing - (omega * t_rel + u[2])) * w_b
    e = np.concatenate([e_r, e_b])
    d2 = d * d
    n = len(r)
    J = np.zeros((2 * n, 3))
    J[:n, 0] = -dx / d * w_r
    J[:n, 1] = -dy / d * w_r
    J[n:, 0] = dy / d2 * w_b
    J[n:, 1] = -dx / d2 * w_b
    J[n:, 2] = -w_b
    return e, J


def solve_xy(observations, omega: float, init: PositionEstimate | None = None, config: SolverConfig | None = None) -> XYSolution:
    """Weighted least squares over ``(s_X, s_Y, t_x)``.

    The cost sums squared range residuals over ``sigma_r^2`` and squared,
    wrapped bearing residuals over ``(omega sigma_t)^2``, where the bearing
    to neighbor ``i`` is predicted as ``omega (t_i - t_x)``. Descent steps are
    preconditioned by the Gauss-Newton normal matrix and halved until the
    cost decreases. The returned covariance is the inverse Gauss-Newton
    Hessian of half the cost, marginalized to ``(s_X, s_Y)``.
    """
    config = config or SolverConfig()
    if not omega > 0:
        raise ValueError("omega must be positive")
    obs = list(observations)
    positions = {tuple(np.round(o.neighbor_pos[:2], 9)) for o in obs}
    if len(obs) < config.min_neighbors_xy or len(positions) < min(2, config.min_neighbors_xy):
        raise Underdetermined(f"{len(positions)} distinct neighbor positions, need {config.min_neighbors_xy}")
    P = np.array([o.neighbor_pos for o in obs])
    r = np.array([o.r for o in obs])
    w_r = 1.0 / np.array([o.sigma_r for o in obs])
    w_b = 1.0 / (omega * config.sigma_t)
    t = np.array([o.t_i for o in obs], dtype=float)
    t_ref = float(t.min())
    t_rel = (t - t_ref) * NS

    if init is not None:
        s0 = init.s[:2].copy()
    else:
        w = w_r ** 2
        s0 = (P[:, :2] * w[:, None]).sum(axis=0) / w.sum()
    b0 = np.arctan2(P[:, 1] - s0[1], P[:, 0] - s0[0]) - omega * t_rel
    theta0 = math.atan2(np.sin(b0).sum(), np.cos(b0).sum())
    u = np.array([s0[0], s0[1], theta0])

    e, J = _residuals(u, P, t_rel, r, w_r, w_b, omega)
    cost = float(e @ e)
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        H = J.T @ J
        g = J.T @ e
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -g
        lam = config.step_init
        while True:
            u_new = u + lam * step
            e_new, J_new = _residuals(u_new, P, t_rel, r, w_r, w_b, omega)
            cost_new = float(e_new @ e_new)
            if cost_new <= cost or lam < 1e-12:
                break
            lam *= 0.5
        moved = lam * float(np.hypot(step[0], step[1]))
        if cost_new <= cost:
            u, e, J, cost = u_new, e_new, J_new, cost_new
        if moved < config.convergence_tol:
            converged = True
            break
    H = J.T @ J
    if not converged and np.linalg.norm(J.T @ e) > config.convergence_tol * max(1.0, float(np.sqrt(np.trace(H)))):
        raise NoConvergence(f"no convergence after {config.max_iters} iterations")
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise Underdetermined("singular normal matrix") from exc
    if not np.all(np.isfinite(cov)) or np.linalg.cond(H) > 1e14:
        raise Underdetermined("ill-conditioned geometry")
    cov_xy = 0.5 * (cov[:2, :2] + cov[:2, :2].T)
    theta = float(wrap_angle(u[2]))
    t_x = t_ref - theta / omega / NS
    return XYSolution(u[:2].copy(), t_x, cov_xy, math.sqrt(max(np.trace(cov_xy), 0.0) / 2.0), cost, it)


def solve_z(s_X: float, s_Y: float, sigma_xy: float, observations) -> float:
    """Inverse-variance weighted height from elevation angles.

    A neighbor seen above the horizontal plane puts the drone below it.
    """
    obs = [o for o in observations if o.alpha is not None]
    if not obs:
        raise NoElevationData("no observation carries an elevation angle")
    est, var = [], []
    for o in obs:
        d = math.hypot(o.neighbor_pos[0] - s_X, o.neighbor_pos[1] - s_Y)
        ta = math.tan(o.alpha)
        est.append(o.neighbor_pos[2] - d * ta)
        var.append((sigma_xy * ta) ** 2 + (d * o.sigma_alpha / math.cos(o.alpha) ** 2) ** 2)
    est, var = np.array(est), np.array(var)
    finite = np.isfinite(var) & np.isfinite(est)
    if not finite.any():
        raise DegenerateWeights("no finite height uncertainty")
    est, var = est[finite], var[finite]
    exact = var == 0
    if exact.any():
        return float(est[exact].mean())
    w = 1.0 / var
    return float((est * w).sum() / w.sum())


def filter_estimate(prev, new, dt: float, tau: float = 0.06):
    """First-order exponential smoothing; ``prev`` None passes ``new`` through."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    new = np.asarray(new, dtype=float)
    if prev is None:
        return new.copy()
    prev = np.asarray(prev, dtype=float)
    return prev + (1.0 - math.exp(-dt / tau)) * (new - prev)


class AssumptionMonitor:
    """Counts revolutions where the slow-motion assumptions of the solver fail.

    The first violation of each kind is logged at WARNING, later ones at DEBUG.
    """

    def __init__(self, max_omega_change: float = 0.005, max_position_change: float = 0.005):
        self.max_omega_change = max_omega_change
        self.max_position_change = max_position_change
        self.omega_violations = 0
        self.position_violations = 0
        self._omega = None
        self._pos = None

    def check(self, omega: float, position) -> None:
        position = np.asarray(position, dtype=float)
        if self._omega is not None and abs(omega - self._omega) > self.max_omega_change * self._omega:
            self.omega_violations += 1
            level = logging.WARNING if self.omega_violations == 1 else logging.DEBUG
            log.log(level, "spin rate changed by %.2f%% in one revolution", 100 * abs(omega / self._omega - 1))
        if self._pos is not None and np.linalg.norm(position[:2] - self._pos[:2]) > self.max_position_change:
            self.position_violations += 1
            level = logging.WARNING if self.position_violations == 1 else logging.DEBUG
            log.log(level, "position moved %.1f mm in one revolution", 1e3 * np.linalg.norm(position[:2] - self._pos[:2]))
        self._omega = omega
        self._pos = position


class Localizer:
    """Per-drone solver state: warm start, filtering and assumption checks."""

    def __init__(self, config: SolverConfig | None = None):
        self.config = config or SolverConfig()
        self.monitor = AssumptionMonitor()
        self.last: PositionEstimate | None = None
        self.filtered: np.ndarray | None = None
        self._last_time: float | None = None
        self._last_z: float | None = None
        self.revolution = 0

    def update(self, observations, omega: float, now: float) -> PositionEstimate:
        """Solve one revolution; raises :class:`Underdetermined` on dropout."""
        obs = list(observations)
        self.revolution += 1
        xy = solve_xy(obs, omega, init=self.last, config=self.config)
        try:
            z = solve_z(xy.s_xy[0], xy.s_xy[1], xy.sigma_xy, obs)
        except (NoElevationData, DegenerateWeights):
            z = self._last_z if self._last_z is not None else 0.0
        self._last_z = z
        raw = np.array([xy.s_xy[0], xy.s_xy[1], z])
        self.monitor.check(omega, raw)
        if self.filtered is None or self._last_time is None:
            self.filtered = raw.copy()
        else:
            dt = (now - self._last_time) * NS
            self.filtered = filter_estimate(self.filtered, raw, dt, self.config.filter_tau) if dt > 0 else self.filtered
        self._last_time = now
        est = PositionEstimate(self.filtered.copy(), xy.t_x, xy.cov_xy, xy.sigma_xy, omega, self.revolution, len(obs))
        self.last = PositionEstimate(raw, xy.t_x, xy.cov_xy, xy.sigma_xy, omega, self.revolution, len(obs))
        return est
