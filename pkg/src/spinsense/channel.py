"""Optical channel: who sees which packet, and which packets survive overlap.

A packet reaches a physical receiver when the range gate, the sender's LED
coverage region and the receiver wedge all pass at the packet start time, and
an independent Bernoulli draw (``1 - packet_loss_prob``) succeeds. Copies of
one packet from the top and bottom LEDs superpose on the photodiode; any other
temporal overlap destroys every packet involved.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .geometry import RECEIVER_ORDER, ReceiverId, RobotGeometry, SpinState, TxKind, in_fov, led_position, transmitter_visible
from .protocol import (
    PACKET_SPAN_NS,
    DecodeError,
    Packet,
    PulseTrain,
    decode_pulse_train,
    decode_superposition,
    superpose,
)

ORIGIN_BIT = {TxKind.TOP: 1, TxKind.BOTTOM: 2}
CHANNEL_LOG_COLUMNS = ("time_ns", "rx_robot", "rx_id", "tx_robot", "origin", "outcome", "cause")
CHANNEL_LOG_SCHEMA = 1


class LossCause:
    COLLISION = "Collision"
    RANDOM = "RandomLoss"
    DECODE = "DecodeError"


@dataclass(frozen=True)
class ChannelConfig:
    max_range: float = 0.5
    packet_loss_prob: float = 0.02
    crossing_jitter_sigma: float = 0.0
    seed: int = 0
    jitter_tol_ns: int = 50

    def __post_init__(self):
        if not 0.0 <= self.packet_loss_prob <= 1.0:
            raise ValueError("packet_loss_prob must lie in [0, 1]")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        if self.crossing_jitter_sigma < 0:
            raise ValueError("crossing_jitter_sigma must be >= 0")


@dataclass(frozen=True)
class TransmissionEvent:
    robot_id: int
    origin: TxKind
    train: PulseTrain
    tx_pos_at_start: np.ndarray
    packet: Packet | None = None

    @property
    def start_time(self) -> int:
        return self.train.start_time


@dataclass(frozen=True)
class ReceptionEvent:
    receiver_robot_id: int
    receiver_id: ReceiverId
    packet: Packet
    t_start: int
    from_origin: TxKind
    tx_robot_id: int


@dataclass(frozen=True)
class LossRecord:
    time_ns: int
    rx_robot: int
    rx_id: ReceiverId
    tx_robot: int
    origin: TxKind | None
    cause: str


@dataclass(frozen=True)
class Candidate:
    """A packet copy that passed every gate at one physical receiver."""

    rx_robot: int
    rx_id: ReceiverId
    tx_robot: int
    origin: TxKind
    train: PulseTrain

    @property
    def t_start(self) -> int:
        return self.train.start_time

    @property
    def span_end(self) -> int:
        return self.train.start_time + PACKET_SPAN_NS[self.origin]


@dataclass
class RobotSnapshot:
    robot_id: int
    position: np.ndarray
    spin: SpinState
    geometry: RobotGeometry
    hears: frozenset | None = None
    receives: bool = True

    def allows(self, tx_robot: int) -> bool:
        return self.hears is None or tx_robot in self.hears


def receiver_rng(seed: int, robot_id: int, rx_index: int) -> np.random.Generator:
    """Independent stream per physical receiver, stable under any execution order."""
    return np.random.default_rng([int(seed), int(robot_id), 1, int(rx_index)])


class ReceiverRngs(dict):
    def __init__(self, seed: int):
        super().__init__()
        self.seed = seed

    def __missing__(self, key):
        rng = receiver_rng(self.seed, *key)
        self[key] = rng
        return rng


def receiver_pose_spin(snapshot: RobotSnapshot) -> SpinState:
    return SpinState(snapshot.position, snapshot.spin.omega, snapshot.spin.phase_ref_time, snapshot.spin.phase_at_ref)


def deliver(tx: TransmissionEvent, world: Mapping[int, RobotSnapshot], config: ChannelConfig, rngs: ReceiverRngs | None = None) -> list[Candidate]:
    """Candidate receptions of one transmission at every other robot's receivers."""
    rngs = ReceiverRngs(config.seed) if rngs is None else rngs
    sender = world[tx.robot_id]
    tx_spec = sender.geometry.transmitter(tx.origin)
    led = led_position(tx_spec, tx.tx_pos_at_start)
    out = []
    for rid in sorted(world):
        snap = world[rid]
        if rid == tx.robot_id or not snap.receives or not snap.allows(tx.robot_id):
            continue
        if not transmitter_visible(tx_spec, tx.tx_pos_at_start, snap.position, config.max_range):
            continue
        spin = receiver_pose_spin(snap)
        for k, rx in enumerate(snap.geometry.ordered_receivers()):
            rng = rngs[(rid, k)]
            hw = rx.half_width_h
            if config.crossing_jitter_sigma > 0:
                hw = hw + rng.normal(0.0, config.crossing_jitter_sigma)
            if not in_fov(spin, rx, tx.start_time, led, half_width_h=hw):
                continue
            if rng.random() < config.packet_loss_prob:
                continue
            out.append(Candidate(rid, rx.id, tx.robot_id, tx.origin, tx.train))
    return out


def collision_flags(start, end) -> np.ndarray:
    """Mark intervals that overlap any other. ``start`` must be sorted ascending."""
    start = np.asarray(start)
    end = np.asarray(end)
    n = len(start)
    hit = np.zeros(n, dtype=bool)
    if n < 2:
        return hit
    prev_max_end = np.maximum.accumulate(end)[:-1]
    hit[1:] |= start[1:] < prev_max_end
    hit[:-1] |= start[1:] < end[:-1]
    return hit


def resolve_collisions(candidates: Iterable[Candidate], jitter_tol: int = 50):
    """Decode the candidates seen by one physical receiver.

    Copies of the same packet (same sender and start) are superposed first;
    the remaining trains collide whenever their spans overlap.
    Returns ``(receptions, losses)``.
    """
    groups: dict[tuple, list[Candidate]] = {}
    for c in candidates:
        groups.setdefault((c.t_start, c.tx_robot), []).append(c)
    keys = sorted(groups)
    if not keys:
        return [], []
    start = np.array([k[0] for k in keys], dtype=np.int64)
    end = np.array([max(c.span_end for c in groups[k]) for k in keys], dtype=np.int64)
    hit = collision_flags(start, end)
    receptions, losses = [], []
    for k, collided in zip(keys, hit):
        members = groups[k]
        first = members[0]
        if collided:
            for c in members:
                losses.append(LossRecord(c.t_start, c.rx_robot, c.rx_id, c.tx_robot, c.origin, LossCause.COLLISION))
            continue
        train = members[0].train if len(members) == 1 else superpose(*(c.train for c in members))
        try:
            pkt = decode_pulse_train(train, jitter_tol)
        except DecodeError:
            losses.append(LossRecord(first.t_start, first.rx_robot, first.rx_id, first.tx_robot, None, LossCause.DECODE))
            continue
        receptions.append(ReceptionEvent(first.rx_robot, first.rx_id, pkt, first.t_start, pkt.origin, first.tx_robot))
    return receptions, losses


@dataclass
class _Pending:
    start: int
    end: int
    tx_robot: int
    bits: int
    mask: int
    collided: bool = False


class StreamingResolver:
    """Collision resolution for one physical receiver across processing blocks.

    Groups are pushed in blocks; a group is finalized once no future packet
    (all of which start at or after the block end) can overlap it.
    """

    def __init__(self, rx_robot: int, rx_id: ReceiverId):
        self.rx_robot = rx_robot
        self.rx_id = rx_id
        self._pending: list[_Pending] = []

    def push(self, start, tx_robot, bits, mask):
        for s, r, b, m in zip(start, tx_robot, bits, mask):
            end = s + max(PACKET_SPAN_NS[o] for o, bit in ORIGIN_BIT.items() if m & bit)
            self._pending.append(_Pending(int(s), int(end), int(r), int(b), int(m)))

    def flush(self, until: int):
        """Finalize groups ending at or before ``until``; returns ``(receptions, losses)``."""
        if not self._pending:
            return [], []
        self._pending.sort(key=lambda g: (g.start, g.tx_robot))
        start = np.fromiter((g.start for g in self._pending), dtype=np.int64, count=len(self._pending))
        end = np.fromiter((g.end for g in self._pending), dtype=np.int64, count=len(self._pending))
        hit = collision_flags(start, end)
        receptions, losses, keep = [], [], []
        for g, h in zip(self._pending, hit):
            g.collided |= bool(h)
            if g.end > until:
                keep.append(g)
                continue
            origins = frozenset(o for o, bit in ORIGIN_BIT.items() if g.mask & bit)
            if g.collided:
                losses.append(LossRecord(g.start, self.rx_robot, self.rx_id, g.tx_robot, _mask_origin(g.mask), LossCause.COLLISION))
                continue
            pkt = decode_superposition(g.bits, origins)
            if pkt is None:
                losses.append(LossRecord(g.start, self.rx_robot, self.rx_id, g.tx_robot, _mask_origin(g.mask), LossCause.DECODE))
            else:
                receptions.append(ReceptionEvent(self.rx_robot, self.rx_id, pkt, g.start, pkt.origin, g.tx_robot))
        self._pending = keep
        return receptions, losses


def _mask_origin(mask: int) -> TxKind:
    return TxKind.BOTTOM if mask & ORIGIN_BIT[TxKind.BOTTOM] else TxKind.TOP


# ---------------------------------------------------------------- log format

def reception_row(ev: ReceptionEvent) -> tuple:
    return (ev.t_start, ev.receiver_robot_id, ev.receiver_id.value, ev.tx_robot_id, ev.from_origin.value, "decoded", "")


def loss_row(rec: LossRecord) -> tuple:
    origin = "" if rec.origin is None else rec.origin.value
    return (rec.time_ns, rec.rx_robot, ReceiverId(rec.rx_id).value, rec.tx_robot, origin, "lost", rec.cause)


def write_channel_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CHANNEL_LOG_COLUMNS)
        w.writerows(rows)


def read_channel_log(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for col in CHANNEL_LOG_COLUMNS:
        vals = [r[col] for r in rows]
        out[col] = np.array(vals, dtype=np.int64) if col in ("time_ns", "rx_robot", "tx_robot") else np.array(vals, dtype=object)
    return out


def rows_to_columns(rows) -> dict[str, np.ndarray]:
    """Channel log rows (as produced by the engine) to column arrays."""
    rows = list(rows)
    cols = list(zip(*rows)) if rows else [[] for _ in CHANNEL_LOG_COLUMNS]
    out = {}
    for col, vals in zip(CHANNEL_LOG_COLUMNS, cols):
        out[col] = np.array(vals, dtype=np.int64) if col in ("time_ns", "rx_robot", "tx_robot") else np.array(vals, dtype=object)
    return out
