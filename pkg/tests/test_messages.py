import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastbft import messages as m
from fastbft.config import ProtocolConfig
from fastbft.simnet import FaultSpec, Scenario
from fastbft.wire import WireError
from helpers import Tap


@pytest.fixture(scope="module")
def observed():
    """Every message sent in a handful of runs that exercise all protocol paths."""
    runs = [
        Scenario(n=7, faults=(FaultSpec(3, "wrong-shares"),), requests=3),
        Scenario(
            n=5,
            faults=(FaultSpec(1, "wrong-shares", end=25.0),),
            requests=8,
            protocol=ProtocolConfig(fallback_threshold=1, fallback_duration=3),
        ),
        Scenario(n=5, faults=(FaultSpec(0, "unscheduled-reboot", start=5.0),), requests=4),
    ]
    msgs = []
    for scn in runs:
        tap = Tap(scn)
        tap.run()
        msgs += [msg for _, _, msg in tap.sent]
    seen = {m.Reply: False}

    def drop_first_reply(s, d, msg):
        if d == 4 and isinstance(msg, m.Reply) and not seen[m.Reply]:
            seen[m.Reply] = True
            return True
        return False

    tap = Tap(Scenario(n=5, requests=3), drop=drop_first_reply)
    tap.run()
    msgs += [msg for _, _, msg in tap.sent]
    return msgs


def test_every_message_type_round_trips(observed):
    for msg in observed:
        raw = m.encode(msg)
        assert raw[0] == msg.TAG
        assert m.decode(raw) == msg
    assert {type(x) for x in observed} == set(m.MESSAGE_TYPES.values())


def test_encoding_is_canonical(observed):
    for msg in observed[:200]:
        raw = m.encode(msg)
        assert m.encode(m.decode(raw)) == raw


def test_tags_are_distinct():
    assert len(m.MESSAGE_TYPES) == len({cls.TAG for cls in m.MESSAGE_TYPES.values()}) == 19


def test_decode_errors():
    raw = m.encode(m.Share(3, 1, 0, 2, bytes(16)))
    with pytest.raises(WireError):
        m.decode(b"")
    with pytest.raises(WireError):
        m.decode(bytes([255]) + raw[1:])
    with pytest.raises(WireError):
        m.decode(raw[:-1])
    with pytest.raises(WireError):
        m.decode(raw + b"\x00")


def test_share_layout_is_length_prefixed_big_endian():
    raw = m.encode(m.Share(3, 1, 0, 2, b"\xaa" * 16))
    body = raw[1:]
    assert body[:8] == struct.pack(">Q", 3)
    assert body[8:16] == struct.pack(">Q", 1)
    assert body[32:36] == struct.pack(">I", 16) and body[36:] == b"\xaa" * 16


def test_negative_integers_are_refused():
    with pytest.raises(WireError):
        m.encode(m.Share(-1, 0, 0, 0, b""))


@given(
    client=st.integers(0, 2**64 - 1),
    seq=st.integers(0, 2**64 - 1),
    op=st.text(max_size=40),
    sig=st.binary(max_size=80),
)
def test_request_round_trip(client, seq, op, sig):
    req = m.Request(client, seq, op, sig)
    assert m.decode(m.encode(req)) == req


@given(st.integers(0, 2**32), st.integers(0, 2**32), st.integers(0, 2**32), st.integers(0, 99), st.binary(max_size=32))
def test_share_round_trip(c, v, epoch, sender, share):
    msg = m.Share(c, v, epoch, sender, share)
    assert m.decode(m.encode(msg)) == msg
