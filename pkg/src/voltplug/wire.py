"""Line codec and command grammar of the plug's serial link.

Frames are printable-ASCII payloads terminated by a single LF.  Parsing is
case-sensitive and whitespace-exact: ``"RELAY ON"`` is a command,
``"RELAYON"`` and ``"relay on"`` are not.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Union

from .errors import VoltplugError

MAX_PAYLOAD = 256
MAX_BUFFER = 4096
TERMINATOR = b"\n"

AT_OK = "OK"
AT_ERROR = "ERROR:(0)"


class WireError(VoltplugError):
    pass


class FrameError(WireError):
    pass


class ParseError(WireError):
    def __init__(self, message: str, token: str = ""):
        super().__init__(message)
        self.token = token


class ArgumentError(ParseError):
    pass


class Verb(enum.Enum):
    RELAY_ON = "RELAY ON"
    RELAY_OFF = "RELAY OFF"
    READ = "READ"
    STATUS = "STATUS"


class Role(enum.IntEnum):
    SLAVE = 0
    MASTER = 1


@dataclass(frozen=True)
class AtTest:
    pass


@dataclass(frozen=True)
class AtName:
    name: str


@dataclass(frozen=True)
class AtPassword:
    pin: str


@dataclass(frozen=True)
class AtRole:
    role: Role


AtCommand = Union[AtTest, AtName, AtPassword, AtRole]
Command = Union[Verb, AtTest, AtName, AtPassword, AtRole]

_PRINTABLE = re.compile(r"[\x20-\x7e]*")
_PIN = re.compile(r"[0-9]{4}")


def encode_frame(payload: str) -> bytes:
    if not isinstance(payload, str) or not _PRINTABLE.fullmatch(payload):
        raise FrameError("payload must be printable ASCII")
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload longer than {MAX_PAYLOAD} bytes")
    return payload.encode("ascii") + TERMINATOR


def decode_frame(frame: bytes) -> str:
    """Payload of one LF-terminated frame."""
    if not isinstance(frame, (bytes, bytearray)):
        raise FrameError("frame must be bytes")
    if not frame.endswith(TERMINATOR):
        raise FrameError("frame is not LF-terminated")
    body = bytes(frame[:-1])
    if len(body) > MAX_PAYLOAD:
        raise FrameError(f"payload longer than {MAX_PAYLOAD} bytes")
    if any(b < 0x20 or b > 0x7E for b in body):
        raise FrameError("payload contains control or non-ASCII bytes")
    return body.decode("ascii")


def valid_name(name: str) -> bool:
    return 0 < len(name) <= 32 and bool(_PRINTABLE.fullmatch(name))


def valid_pin(pin: str) -> bool:
    return bool(_PIN.fullmatch(pin))


def parse_at(line: str) -> AtCommand:
    if not line.startswith("AT"):
        raise ParseError("not an AT command", line[:16])
    if line == "AT":
        return AtTest()
    head, sep, arg = line.partition("=")
    if not sep:
        raise ParseError("unknown AT command", head)
    if head == "AT+NAME":
        if not valid_name(arg):
            raise ArgumentError("name must be 1-32 printable characters", arg)
        return AtName(arg)
    if head == "AT+PSWD":
        if not valid_pin(arg):
            raise ArgumentError("password must be exactly 4 digits", arg)
        return AtPassword(arg)
    if head == "AT+ROLE":
        if arg not in ("0", "1"):
            raise ArgumentError("role must be 0 or 1", arg)
        return AtRole(Role(int(arg)))
    raise ParseError("unknown AT command", head)


def parse_payload(payload: str) -> Command:
    if payload.startswith("AT"):
        return parse_at(payload)
    try:
        return Verb(payload)
    except ValueError:
        pass
    word, _, rest = payload.partition(" ")
    token = rest if word == "RELAY" and rest else (word or payload)
    raise ParseError(f"unknown command {payload!r}", token)


def encode(cmd: Command) -> bytes:
    if isinstance(cmd, Verb):
        return encode_frame(cmd.value)
    if isinstance(cmd, AtTest):
        return encode_frame("AT")
    if isinstance(cmd, AtName):
        return encode_frame(f"AT+NAME={cmd.name}")
    if isinstance(cmd, AtPassword):
        return encode_frame(f"AT+PSWD={cmd.pin}")
    if isinstance(cmd, AtRole):
        return encode_frame(f"AT+ROLE={int(cmd.role)}")
    raise TypeError(f"not a command: {cmd!r}")


def decode(frame: bytes) -> Command:
    """Parse one frame; raises only ``WireError`` subclasses."""
    return parse_payload(decode_frame(frame))


class LineBuffer:
    """Splits a byte stream into LF-terminated frames."""

    def __init__(self, limit: int = MAX_BUFFER):
        self.limit = limit
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        frames = []
        while True:
            idx = self._buf.find(TERMINATOR)
            if idx < 0:
                break
            frames.append(bytes(self._buf[: idx + 1]))
            del self._buf[: idx + 1]
        if len(self._buf) > self.limit:
            self._buf.clear()
            raise FrameError(f"no terminator within {self.limit} bytes")
        return frames
