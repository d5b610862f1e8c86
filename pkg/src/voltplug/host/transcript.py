"""Replay of golden serial transcripts.

A transcript is a text file with one directive per line::

    # comment
    @ scenario resistive        bundled name or path, before power_on
    @ power_on key_pin=1        (re)boot the plug, optionally into AT mode
    @ tick 100000               advance virtual time to this instant (us)
    > AT+NAME=plug01            frame sent to the plug
    < OK                        frame the plug must answer, byte for byte

Every ``>`` line must be followed by exactly one ``<`` line.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .. import wire
from ..device import DeviceConfig, VirtualPlug
from ..simkernel import load_scenario
from .link import InProcessLink


@dataclass(frozen=True)
class Mismatch:
    line_no: int
    sent: str
    expected: bytes
    got: bytes


def replay(path) -> list[Mismatch]:
    """Replay a transcript; returns the replies that differ from the golden file."""
    text = Path(path).read_text()
    scenario = load_scenario("resistive")
    plug = link = None
    pending = None
    out = []
    for no, raw in enumerate(text.splitlines(), 1):
        if not raw or raw.startswith("#"):
            continue
        tag, _, arg = raw.partition(" ")
        if tag == "@":
            verb, _, rest = arg.partition(" ")
            if verb == "scenario":
                scenario = load_scenario(rest)
            elif verb == "power_on":
                key_pin = rest.strip() == "key_pin=1"
                plug = VirtualPlug(scenario, DeviceConfig(key_pin_at_boot=key_pin))
                link = InProcessLink(plug)
            elif verb == "tick":
                plug.tick(int(rest))
            else:
                raise ValueError(f"line {no}: unknown directive {verb!r}")
        elif tag == ">":
            if pending is not None:
                raise ValueError(f"line {no}: two requests without a reply line")
            if link is None:
                raise ValueError(f"line {no}: request before power_on")
            pending = (arg, link.send_bytes(arg.encode("ascii") + wire.TERMINATOR))
        elif tag == "<":
            if pending is None:
                raise ValueError(f"line {no}: reply without a request")
            sent, got = pending
            expected = arg.encode("ascii") + wire.TERMINATOR
            if got != expected:
                out.append(Mismatch(no, sent, expected, got))
            pending = None
        else:
            raise ValueError(f"line {no}: unknown line tag {tag!r}")
    if pending is not None:
        raise ValueError("transcript ends with an unanswered request")
    return out
