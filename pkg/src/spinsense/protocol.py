"""Packet framing, modified 4-PPM pulse trains, CRC-4 and the pure-ALOHA scheduler.

Wire format (MSB first, 30 bits)::

    [source_id:6][packet_index:4][payload:16][msg_crc:4]

The 30 bits are sent as 15 two-bit symbols. Symbol ``k`` occupies
``[1000 k, 1000 k + 800)`` ns after the frame start: four 200 ns slots followed
by a 200 ns guard gap. A symbol of value ``v`` is one 200 ns pulse in slot
``v``. The last pulse is stretched to 400 ns when the packet leaves the bottom
transmitter, which lets a receiver tell the two LED clusters apart.

Top and bottom copies of a packet start together and carry the same bits, so
their superposition decodes cleanly (as a bottom packet).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import TxKind

N_BITS = 30
N_SYMBOLS = 15
SLOT_NS = 200
SYMBOL_NS = 4 * SLOT_NS + SLOT_NS
PULSE_NS = 200
LONG_PULSE_NS = 400
DEFAULT_JITTER_NS = 50

# Airtime used for collision accounting; constant per origin.
PACKET_SPAN_NS = {TxKind.TOP: (N_SYMBOLS - 1) * SYMBOL_NS + 4 * SLOT_NS}
PACKET_SPAN_NS[TxKind.BOTTOM] = PACKET_SPAN_NS[TxKind.TOP] + (LONG_PULSE_NS - PULSE_NS)

LED_ON_NS = {TxKind.TOP: N_SYMBOLS * PULSE_NS, TxKind.BOTTOM: (N_SYMBOLS - 1) * PULSE_NS + LONG_PULSE_NS}

MAX_MESSAGE_BYTES = 2 * 16
POSITION_MESSAGE_BYTES = 6
POSITION_REPORT_BYTES = 8

INTERVAL_MIN_NS = 50_000
INTERVAL_MAX_NS = 100_000


class ProtocolError(ValueError):
    pass


class DecodeError(ProtocolError):
    """Pulse train does not decode to a packet (collision or corruption)."""


class MalformedTiming(DecodeError):
    pass


class BadWidth(DecodeError):
    pass


class WrongBitCount(DecodeError):
    pass


class IncompleteError(ProtocolError):
    pass


class CrcMismatch(ProtocolError):
    pass


# ---------------------------------------------------------------- CRC-4

def _reflect(value: int, width: int) -> int:
    out = 0
    for _ in range(width):
        out = (out << 1) | (value & 1)
        value >>= 1
    return out


def _make_crc4_table() -> tuple[int, ...]:
    # reflected form of x^4 + x + 1
    poly = _reflect(0x3, 4)
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        table.append(crc)
    return tuple(table)


_CRC4_TABLE = _make_crc4_table()


def crc4(message: bytes) -> int:
    """CRC-4/ITU (G.704): poly x^4+x+1, init 0, reflected in/out, no xorout."""
    crc = 0
    for byte in bytes(message):
        crc = _CRC4_TABLE[(crc ^ byte) & 0xFF]
    return crc & 0xF


# ---------------------------------------------------------------- packets

@dataclass(frozen=True)
class Packet:
    source_id: int
    packet_index: int
    payload: bytes
    msg_crc: int
    origin: TxKind = TxKind.TOP

    def __post_init__(self):
        if not 0 <= self.source_id < 64:
            raise ProtocolError(f"source_id {self.source_id} does not fit 6 bits")
        if not 0 <= self.packet_index < 16:
            raise ProtocolError(f"packet_index {self.packet_index} does not fit 4 bits")
        if len(self.payload) != 2:
            raise ProtocolError("payload must be exactly 2 bytes")
        if not 0 <= self.msg_crc < 16:
            raise ProtocolError("msg_crc does not fit 4 bits")
        object.__setattr__(self, "payload", bytes(self.payload))
        object.__setattr__(self, "origin", TxKind(self.origin))

    def to_bits(self) -> int:
        payload = int.from_bytes(self.payload, "big")
        return (self.source_id << 24) | (self.packet_index << 20) | (payload << 4) | self.msg_crc

    @classmethod
    def from_bits(cls, bits: int, origin=TxKind.TOP) -> "Packet":
        if not 0 <= bits < 1 << N_BITS:
            raise WrongBitCount("more than 30 bits")
        return cls(
            source_id=(bits >> 24) & 0x3F,
            packet_index=(bits >> 20) & 0xF,
            payload=((bits >> 4) & 0xFFFF).to_bytes(2, "big"),
            msg_crc=bits & 0xF,
            origin=origin,
        )

    def with_origin(self, origin) -> "Packet":
        return Packet(self.source_id, self.packet_index, self.payload, self.msg_crc, origin)


@dataclass(frozen=True)
class PulseTrain:
    """LED on/off edges in absolute ns. ``edges`` has shape (n, 2)."""

    start_time: int
    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", e)

    @property
    def widths(self) -> np.ndarray:
        return self.edges[:, 1] - self.edges[:, 0]

    @property
    def on_time(self) -> int:
        return int(self.widths.sum())

    def shifted(self, dt: int) -> "PulseTrain":
        return PulseTrain(self.start_time + dt, self.edges + dt)

    def __eq__(self, other):
        return (
            isinstance(other, PulseTrain)
            and self.start_time == other.start_time
            and np.array_equal(self.edges, other.edges)
        )

    __hash__ = None


def symbols_of(bits: int) -> list[int]:
    return [(bits >> (2 * (N_SYMBOLS - 1 - k))) & 0b11 for k in range(N_SYMBOLS)]


def encode_packet(p: Packet, start_time: int = 0) -> PulseTrain:
    edges = np.empty((N_SYMBOLS, 2), dtype=np.int64)
    for k, v in enumerate(symbols_of(p.to_bits())):
        on = start_time + k * SYMBOL_NS + v * SLOT_NS
        edges[k] = (on, on + PULSE_NS)
    if p.origin is TxKind.BOTTOM:
        edges[-1, 1] = edges[-1, 0] + LONG_PULSE_NS
    return PulseTrain(int(start_time), edges)


def superpose(*trains: PulseTrain) -> PulseTrain:
    """Light from several trains on one photodiode: union of on-intervals."""
    edges = np.concatenate([t.edges for t in trains])
    edges = edges[np.argsort(edges[:, 0], kind="stable")]
    merged = []
    for on, off in edges:
        if merged and on <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], off)
        else:
            merged.append([on, off])
    return PulseTrain(min(t.start_time for t in trains), np.array(merged, dtype=np.int64))


def decode_pulse_train(train: PulseTrain, jitter_tol: int = DEFAULT_JITTER_NS) -> Packet:
    """Inverse of :func:`encode_packet`; the frame start is ``train.start_time``.

    Raises a :class:`DecodeError` subclass for anything that is not a single
    clean packet.
    """
    edges = train.edges
    if len(edges) != N_SYMBOLS:
        raise WrongBitCount(f"{len(edges)} pulses, expected {N_SYMBOLS}")
    rel = edges[:, 0] - train.start_time
    if np.any(rel < -jitter_tol):
        raise MalformedTiming("pulse before frame start")
    k = np.floor((rel + jitter_tol) / SYMBOL_NS).astype(np.int64)
    offset = rel - k * SYMBOL_NS
    v = np.rint(offset / SLOT_NS).astype(np.int64)
    if np.any(np.abs(offset - v * SLOT_NS) > jitter_tol) or np.any((v < 0) | (v > 3)):
        raise MalformedTiming("pulse off the slot grid")
    if not np.array_equal(k, np.arange(N_SYMBOLS)):
        raise WrongBitCount("symbols missing or repeated")
    widths = edges[:, 1] - edges[:, 0]
    if np.any(np.abs(widths[:-1] - PULSE_NS) > jitter_tol):
        raise BadWidth("inner pulse width")
    last = widths[-1]
    if abs(last - PULSE_NS) <= jitter_tol:
        origin = TxKind.TOP
    elif abs(last - LONG_PULSE_NS) <= jitter_tol:
        origin = TxKind.BOTTOM
    else:
        raise BadWidth(f"last pulse {last} ns")
    bits = 0
    for sym in v:
        bits = (bits << 2) | int(sym)
    return Packet.from_bits(bits, origin)


@lru_cache(maxsize=65536)
def decode_superposition(bits: int, origins: frozenset) -> Packet | None:
    """Decode the light of copies of one packet (one per origin), or None on failure.

    Cached because beacons repeat the same few packets indefinitely.
    """
    trains = [encode_packet(Packet.from_bits(bits, o)) for o in sorted(origins, key=lambda o: o.value)]
    try:
        return decode_pulse_train(superpose(*trains))
    except DecodeError:
        return None


# ---------------------------------------------------------------- messages

@dataclass(frozen=True)
class Message:
    source_id: int
    data: bytes
    kind: str = "opaque"

    def __post_init__(self):
        object.__setattr__(self, "data", bytes(self.data))


def split_message(m: Message, origin=TxKind.TOP) -> list[Packet]:
    """Cut a message into 2-byte packets; the CRC covers the zero-padded payload."""
    data = m.data
    if len(data) > MAX_MESSAGE_BYTES:
        raise ProtocolError(f"message of {len(data)} bytes exceeds {MAX_MESSAGE_BYTES}")
    if len(data) % 2:
        data = data + b"\x00"
    if not data:
        data = b"\x00\x00"
    crc = crc4(data)
    return [Packet(m.source_id, i, data[2 * i:2 * i + 2], crc, origin) for i in range(len(data) // 2)]


def assemble_message(packets, length: int | None = None, kind: str = "opaque") -> Message:
    """Reassemble packets of one message. ``length`` trims padding when known."""
    packets = list(packets)
    if not packets:
        raise IncompleteError("no packets")
    by_index = {}
    for p in packets:
        by_index.setdefault(p.packet_index, p)
    sources = {p.source_id for p in packets}
    if len(sources) != 1:
        raise ProtocolError(f"packets from several sources: {sorted(sources)}")
    n = max(by_index) + 1 if length is None else math.ceil(length / 2) or 1
    missing = [i for i in range(n) if i not in by_index]
    if missing:
        raise IncompleteError(f"missing packet indices {missing}")
    data = b"".join(by_index[i].payload for i in range(n))
    crcs = {by_index[i].msg_crc for i in range(n)}
    if len(crcs) != 1 or crc4(data) != crcs.pop():
        raise CrcMismatch("message CRC does not match")
    if length is not None:
        data = data[:length]
    return Message(sources.pop(), data, kind)


class MessageAssembler:
    """Streaming reassembly for one source with a known message length."""

    def __init__(self, length: int, kind: str = "opaque"):
        self.length = length
        self.kind = kind
        self.n_packets = max(1, math.ceil(length / 2))
        self._buf: dict[int, Packet] = {}
        self._crc = None

    def holds(self, p: Packet) -> bool:
        """True when ``p`` duplicates a packet of the complete message currently held."""
        q = self._buf.get(p.packet_index)
        return len(self._buf) == self.n_packets and q is not None and q.payload == p.payload and q.msg_crc == p.msg_crc

    def add(self, p: Packet) -> Message | None:
        if p.packet_index >= self.n_packets:
            return None
        if self._crc is not None and p.msg_crc != self._crc:
            self._buf.clear()
        self._crc = p.msg_crc
        self._buf[p.packet_index] = p
        if len(self._buf) < self.n_packets:
            return None
        try:
            return assemble_message(self._buf.values(), self.length, self.kind)
        except CrcMismatch:
            # keep only the newest packet; the rest may belong to an older version
            self._buf = {p.packet_index: p}
            return None


# ---------------------------------------------------------------- payload codecs

def encode_position(v) -> bytes:
    """Signed 16-bit millimeters, little-endian, X, Y, Z; round half away from zero."""
    v = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(v)) or np.any(np.abs(v) >= 32.767):
        raise ProtocolError(f"position {v} out of encodable range")
    mm = [int(math.copysign(math.floor(abs(c) * 1000.0 + 0.5), c)) for c in v]
    return struct.pack("<hhh", *mm)


def decode_position(data: bytes) -> np.ndarray:
    if len(data) < 6:
        raise ProtocolError("position needs 6 bytes")
    return np.array(struct.unpack("<hhh", bytes(data[:6])), dtype=float) / 1000.0


def encode_position_report(v, sigma_xy: float) -> bytes:
    """Position plus the sender's own horizontal uncertainty (uint16, 0.1 mm units)."""
    s = 65535 if not np.isfinite(sigma_xy) else min(65535, max(0, int(round(sigma_xy * 1e4))))
    return encode_position(v) + struct.pack("<H", s)


def decode_position_report(data: bytes) -> tuple[np.ndarray, float]:
    pos = decode_position(data)
    (s,) = struct.unpack("<H", bytes(data[6:8]))
    return pos, s / 1e4


# ---------------------------------------------------------------- ALOHA

class AlohaScheduler:
    """Uncoordinated transmitter: start-to-start gaps i.i.d. uniform on [min, max] ns."""

    def __init__(self, seed=0, interval_min: int = INTERVAL_MIN_NS, interval_max: int = INTERVAL_MAX_NS, start: int = 0):
        if not 0 < interval_min <= interval_max:
            raise ValueError("need 0 < interval_min <= interval_max")
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.interval_min = interval_min
        self.interval_max = interval_max
        self._next = int(start)
        self._buffer = np.empty(0, dtype=np.int64)

    def draw_intervals(self, n: int) -> np.ndarray:
        return np.rint(self.rng.uniform(self.interval_min, self.interval_max, size=n)).astype(np.int64)

    def next_transmission_time(self, now: int) -> int:
        return int(now) + int(self.draw_intervals(1)[0])

    def transmissions_until(self, t_end: int) -> np.ndarray:
        """Start times of this transmitter's packets in ``[previous end, t_end)``."""
        out = []
        while True:
            if self._buffer.size == 0:
                gaps = self.draw_intervals(256)
                self._buffer = self._next + np.concatenate(([0], np.cumsum(gaps[:-1])))
                self._next = int(self._buffer[-1] + gaps[-1])
            cut = np.searchsorted(self._buffer, t_end, side="left")
            out.append(self._buffer[:cut])
            self._buffer = self._buffer[cut:]
            if self._buffer.size:
                break
        return np.concatenate(out)
