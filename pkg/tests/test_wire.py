import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voltplug import wire
from voltplug.wire import (
    ArgumentError,
    AtName,
    AtPassword,
    AtRole,
    AtTest,
    FrameError,
    LineBuffer,
    ParseError,
    Role,
    Verb,
    WireError,
    decode,
    encode,
    parse_at,
)


def test_verb_mapping():
    assert encode(Verb.RELAY_ON) == b"RELAY ON\n"
    assert decode(b"READ\n") is Verb.READ
    assert decode(b"STATUS\n") is Verb.STATUS


@pytest.mark.parametrize("frame,token", [
    (b"RELAYON\n", "RELAYON"),
    (b"relay on\n", "relay"),
    (b"RELAY SIDEWAYS\n", "SIDEWAYS"),
    (b"READ \n", "READ"),
    (b"FOO BAR\n", "FOO"),
])
def test_parse_errors_carry_token(frame, token):
    with pytest.raises(ParseError) as exc:
        decode(frame)
    assert exc.value.token == token


def test_frame_errors():
    with pytest.raises(FrameError):
        decode(b"READ")
    with pytest.raises(FrameError):
        decode(b"R" * 257 + b"\n")
    with pytest.raises(FrameError):
        decode(b"RE\tAD\n")
    with pytest.raises(FrameError):
        wire.encode_frame("x" * 257)
    assert wire.decode_frame(wire.encode_frame("x" * 256)) == "x" * 256


def test_parse_at_examples():
    assert parse_at("AT") == AtTest()
    assert parse_at("AT+NAME=plug01") == AtName("plug01")
    assert parse_at("AT+ROLE=0") == AtRole(Role.SLAVE)
    assert parse_at("AT+ROLE=1") == AtRole(Role.MASTER)
    assert parse_at("AT+PSWD=0042") == AtPassword("0042")
    for bad in ("AT+PSWD=abcd", "AT+PSWD=12345", "AT+NAME=" + "n" * 33, "AT+ROLE=2"):
        with pytest.raises(ArgumentError):
            parse_at(bad)
    for bad in ("AT+BAUD=9600", "ATX", "READ"):
        with pytest.raises(ParseError):
            parse_at(bad)


COMMANDS = [Verb.RELAY_ON, Verb.RELAY_OFF, Verb.READ, Verb.STATUS, AtTest(), AtRole(Role.SLAVE), AtRole(Role.MASTER)]


def test_round_trip_fixed_commands():
    for c in COMMANDS:
        assert decode(encode(c)) == c


printable = st.text(alphabet=st.characters(min_codepoint=0x20, max_codepoint=0x7E), min_size=1, max_size=32)
at_commands = st.one_of(
    st.sampled_from(COMMANDS),
    printable.map(AtName),
    st.from_regex(r"[0-9]{4}", fullmatch=True).map(AtPassword),
)


@given(at_commands)
def test_round_trip_constructible(cmd):
    assert decode(encode(cmd)) == cmd


@settings(max_examples=500)
@given(st.binary(max_size=4096))
def test_decode_is_total(data):
    try:
        decode(data)
    except WireError:
        pass


@settings(max_examples=200)
@given(st.lists(st.sampled_from([b"READ\n", b"RELAY ON\n", b"x", b"\n", b"STATUS"]), max_size=40), st.integers(1, 7))
def test_line_buffer_chunking_invariant(parts, chunk):
    data = b"".join(parts)
    whole = LineBuffer().feed(data)
    buf = LineBuffer()
    pieces = []
    for k in range(0, len(data), chunk):
        pieces += buf.feed(data[k : k + chunk])
    assert pieces == whole
    assert all(f.endswith(b"\n") for f in whole)


def test_line_buffer_overflow():
    buf = LineBuffer()
    with pytest.raises(FrameError):
        buf.feed(b"a" * 4097)
    assert buf.feed(b"READ\n") == [b"READ\n"]
