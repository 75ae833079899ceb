import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinsense.geometry import TxKind
from spinsense.protocol import (
    LED_ON_NS,
    PACKET_SPAN_NS,
    AlohaScheduler,
    BadWidth,
    CrcMismatch,
    DecodeError,
    IncompleteError,
    MalformedTiming,
    Message,
    MessageAssembler,
    Packet,
    ProtocolError,
    PulseTrain,
    WrongBitCount,
    assemble_message,
    crc4,
    decode_position,
    decode_position_report,
    decode_pulse_train,
    decode_superposition,
    encode_packet,
    encode_position,
    encode_position_report,
    split_message,
    superpose,
)


def crc4_long_division(data: bytes) -> int:
    """Bit-serial oracle: reflect each byte, divide by x^4+x+1 (0b10011), reflect the remainder."""
    bits = []
    for byte in data:
        bits += [(byte >> i) & 1 for i in range(8)]  # LSB first = reflected input
    reg = bits + [0, 0, 0, 0]
    poly = [1, 0, 0, 1, 1]
    for i in range(len(bits)):
        if reg[i]:
            for j in range(5):
                reg[i + j] ^= poly[j]
    rem = reg[-4:]
    # remainder MSB-first, reflected on output
    return sum(b << i for i, b in enumerate(rem))


def random_packet(rng, origin=TxKind.TOP):
    return Packet(int(rng.integers(64)), int(rng.integers(16)), bytes(rng.integers(0, 256, 2, dtype=np.uint8)), int(rng.integers(16)), origin)


def test_crc4_check_value():
    assert crc4(b"123456789") == 0x7
    assert crc4(b"") == 0


@given(st.binary(max_size=32))
def test_crc4_matches_long_division(data):
    assert crc4(data) == crc4_long_division(data)


@pytest.mark.parametrize("length", [1, 2, 3, 4])
def test_crc4_detects_every_single_bit_error(length, rng):
    for _ in range(50):
        msg = bytes(rng.integers(0, 256, length, dtype=np.uint8))
        c = crc4(msg)
        for bit in range(8 * length):
            flipped = bytearray(msg)
            flipped[bit // 8] ^= 1 << (bit % 8)
            assert crc4(bytes(flipped)) != c


def test_packet_bit_layout():
    p = Packet(0b101010, 0b0011, b"\xab\xcd", 0b1001)
    assert p.to_bits() == (0b101010 << 24) | (0b0011 << 20) | (0xABCD << 4) | 0b1001
    assert Packet.from_bits(p.to_bits()) == p
    with pytest.raises(ProtocolError):
        Packet(64, 0, b"\x00\x00", 0)
    with pytest.raises(ProtocolError):
        Packet(1, 0, b"\x00", 0)


def test_pulse_train_shape():
    p = Packet(5, 1, b"\x12\x34", 3)
    top = encode_packet(p, start_time=1000)
    assert len(top.edges) == 15
    assert top.on_time == LED_ON_NS[TxKind.TOP] == 3000
    assert np.all(top.widths == 200)
    # every pulse stays inside its 800 ns symbol window
    rel = top.edges[:, 0] - 1000 - np.arange(15) * 1000
    assert np.all((rel >= 0) & (rel <= 600))
    bottom = encode_packet(p.with_origin(TxKind.BOTTOM), start_time=1000)
    assert bottom.widths[-1] == 400 and bottom.on_time == LED_ON_NS[TxKind.BOTTOM]
    assert PACKET_SPAN_NS[TxKind.TOP] == 14800 and PACKET_SPAN_NS[TxKind.BOTTOM] == 15000


@settings(max_examples=200)
@given(st.integers(0, (1 << 30) - 1), st.sampled_from([TxKind.TOP, TxKind.BOTTOM]), st.integers(0, 10**12))
def test_encode_decode_roundtrip(bits, origin, start):
    p = Packet.from_bits(bits, origin)
    assert decode_pulse_train(encode_packet(p, start)) == p


def test_decode_tolerates_jitter_within_tolerance(rng):
    p = Packet(9, 2, b"\x0f\xf0", 6, TxKind.BOTTOM)
    train = encode_packet(p, 0)
    noisy = PulseTrain(0, train.edges + rng.integers(-20, 21, train.edges.shape))
    assert decode_pulse_train(noisy, jitter_tol=50) == p
    shifted = train.edges.copy()
    shifted[4] += 100
    with pytest.raises(MalformedTiming):
        decode_pulse_train(PulseTrain(0, shifted))


def test_decode_error_kinds():
    p = Packet(1, 1, b"\x00\x01", 2)
    train = encode_packet(p, 0)
    with pytest.raises(WrongBitCount):
        decode_pulse_train(PulseTrain(0, train.edges[:-1]))
    wide = train.edges.copy()
    wide[-1, 1] += 100
    with pytest.raises(BadWidth):
        decode_pulse_train(PulseTrain(0, wide))
    inner = train.edges.copy()
    inner[3, 1] += 150
    with pytest.raises(BadWidth):
        decode_pulse_train(PulseTrain(0, inner))


def test_top_bottom_copies_superpose_to_bottom():
    p = Packet(3, 0, b"\xbe\xef", 11)
    both = superpose(encode_packet(p, 500), encode_packet(p.with_origin(TxKind.BOTTOM), 500))
    assert decode_pulse_train(both) == p.with_origin(TxKind.BOTTOM)
    assert decode_superposition(p.to_bits(), frozenset({TxKind.TOP, TxKind.BOTTOM})).origin is TxKind.BOTTOM
    assert decode_superposition(p.to_bits(), frozenset({TxKind.TOP})) == p


def test_overlapping_distinct_packets_fail(rng):
    failures = 0
    n = 2000
    for _ in range(n):
        a, b = random_packet(rng), random_packet(rng)
        off = int(rng.integers(-14800, 14801))
        try:
            decode_pulse_train(superpose(encode_packet(a, 20000), encode_packet(b, 20000 + off)))
        except DecodeError:
            failures += 1
    assert failures / n > 0.99


def test_message_split_and_assemble(rng):
    data = bytes(rng.integers(0, 256, 7, dtype=np.uint8))
    pkts = split_message(Message(12, data))
    assert len(pkts) == 4 and {p.msg_crc for p in pkts} == {crc4(data + b"\x00")}
    shuffled = [pkts[i] for i in rng.permutation(4)]
    assert assemble_message(shuffled, length=7).data == data
    with pytest.raises(IncompleteError):
        assemble_message(pkts[:3], length=7)
    bad = pkts[1]
    corrupt = Packet(bad.source_id, bad.packet_index, bytes([bad.payload[0] ^ 0x10, bad.payload[1]]), bad.msg_crc)
    with pytest.raises(CrcMismatch):
        assemble_message([pkts[0], corrupt, pkts[2], pkts[3]], length=7)
    with pytest.raises(ProtocolError):
        split_message(Message(1, bytes(33)))


def test_streaming_assembler_handles_content_change():
    asm = MessageAssembler(6)
    old = split_message(Message(4, encode_position((0.1, 0.2, 0.3))))
    new = split_message(Message(4, encode_position((0.4, 0.5, 0.6))))
    assert asm.add(old[0]) is None and asm.add(old[1]) is None
    # a new message version interrupts the old one
    assert asm.add(new[2]) is None
    assert asm.add(new[0]) is None
    msg = asm.add(new[1])
    np.testing.assert_allclose(decode_position(msg.data), (0.4, 0.5, 0.6))
    assert asm.holds(new[0]) and not asm.holds(old[0])


def test_position_codec_rounding():
    assert decode_position(encode_position((0.0005, -0.0005, 0.0014))).tolist() == [0.001, -0.001, 0.001]
    with pytest.raises(ProtocolError):
        encode_position((40.0, 0, 0))
    pos, sigma = decode_position_report(encode_position_report((0.1, -0.2, 0.05), 0.00123))
    assert sigma == pytest.approx(0.0012) and pos.tolist() == [0.1, -0.2, 0.05]


def test_aloha_intervals_and_duty():
    s = AlohaScheduler(7)
    starts = s.transmissions_until(10**9)
    gaps = np.diff(starts)
    assert gaps.min() >= 50_000 and gaps.max() <= 100_000
    assert gaps.mean() == pytest.approx(75_000, rel=0.01)
    assert LED_ON_NS[TxKind.TOP] / gaps.mean() == pytest.approx(0.04, rel=0.01)
    assert s.next_transmission_time(1000) - 1000 in range(50_000, 100_001)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5_000_000), min_size=1, max_size=8))
def test_aloha_chunking_is_invisible(cuts):
    whole = AlohaScheduler(3).transmissions_until(20_000_000)
    s = AlohaScheduler(3)
    t = 0
    parts = []
    for c in cuts:
        t += c
        parts.append(s.transmissions_until(t))
    parts.append(s.transmissions_until(20_000_000))
    got = np.concatenate(parts)
    n = min(len(got), len(whole))
    np.testing.assert_array_equal(got[:n], whole[:n])
