"""The virtual plug.

An event-driven state machine: it reacts to one serial line or one ``tick``
at a time and never reads the wall clock.  Callers that share a plug between
threads must serialise access themselves.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from . import wire
from .errors import ConfigurationError, InsufficientDataError, ProtocolStateError
from .metering import DEFAULT_OFFSET_WINDOW, Measurement, measure
from .simkernel import ChannelStream, SampleStream, Scenario

log = logging.getLogger(__name__)

RELAY_RATING_A = 10.0


class Mode(enum.Enum):
    AT = "at"
    DATA = "data"


@dataclass(frozen=True)
class DeviceConfig:
    name: str = "HC-05"
    password: str = "1234"
    role: wire.Role = wire.Role.SLAVE
    key_pin_at_boot: bool = False

    def __post_init__(self):
        if not wire.valid_name(self.name):
            raise ConfigurationError("name must be 1-32 printable characters")
        if not wire.valid_pin(self.password):
            raise ConfigurationError("password must be 4 digits")
        object.__setattr__(self, "role", wire.Role(self.role))


@dataclass(frozen=True)
class LogRecord:
    t_virtual_us: int
    scenario: str
    measurement: Measurement

    def to_json(self) -> str:
        return json.dumps(
            {
                "t_virtual_us": self.t_virtual_us,
                "scenario": self.scenario,
                "measurement": self.measurement.to_dict(),
            },
            separators=(",", ":"),
        )


class VirtualPlug:
    """Relay, metering loop and HC-05 style serial endpoint.

    The module enters AT mode only when ``key_pin_at_boot`` is set at
    ``power_on``; otherwise it is in data mode, where the metering loop runs
    on ``tick``.  Measurements are produced for consecutive windows of
    ``window_cycles`` mains cycles.
    """

    def __init__(
        self,
        scenario: Scenario,
        config: DeviceConfig = DeviceConfig(),
        *,
        window_cycles: int = 2,
        offset_window: int = DEFAULT_OFFSET_WINDOW,
        compensate_skew: bool = True,
        auto_trip: bool = False,
        relay_rating_a: float = RELAY_RATING_A,
        keep_samples: bool = False,
    ):
        if window_cycles < 1:
            raise ConfigurationError("window_cycles must be >= 1")
        self.scenario = scenario
        self.config = config
        self.window_cycles = window_cycles
        self.offset_window = offset_window
        self.compensate_skew = compensate_skew
        self.auto_trip = auto_trip
        self.relay_rating_a = relay_rating_a
        self.keep_samples = keep_samples
        self._powered = False
        self.power_on(config)

    # -- power and state ---------------------------------------------------

    def power_on(self, config: Optional[DeviceConfig] = None) -> Mode:
        if config is not None:
            self.config = config
        self.mode = Mode.AT if self.config.key_pin_at_boot else Mode.DATA
        self.relay_closed = False
        self._boot_us = self.scenario.timing.start_us
        self.clock_us = self._boot_us
        self._log: list[LogRecord] = []
        self._recorded: list[tuple] = []
        self._start_acquisition(self._boot_us)
        self._powered = True
        return self.mode

    def _start_acquisition(self, start_us: int):
        timing = self.scenario.timing
        self._sampler = self.scenario.with_timing(start_us=int(start_us)).sampler()
        self._acq_start = int(start_us)
        self._k_done = 0
        self._windows_done = 0
        self._buf: Optional[tuple] = None
        freq = Fraction(self.scenario.waveform.freq_hz)
        self._window_us = Fraction(self.window_cycles * 1_000_000) / freq
        self._period = timing.period_us

    @property
    def uptime_us(self) -> int:
        return self.clock_us - self._boot_us

    @property
    def measurements(self) -> tuple[Measurement, ...]:
        return tuple(r.measurement for r in self._log)

    @property
    def log(self) -> tuple[LogRecord, ...]:
        return tuple(self._log)

    @property
    def latest(self) -> Optional[Measurement]:
        return self._log[-1].measurement if self._log else None

    def log_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self._log)

    def set_relay(self, closed: bool):
        # Takes effect from the next sample that has not been taken yet.
        self.relay_closed = bool(closed)

    # -- serial endpoint ---------------------------------------------------------

    def handle_at(self, line: str) -> str:
        if self.mode is not Mode.AT:
            raise ProtocolStateError("AT commands are only accepted in AT mode")
        try:
            cmd = wire.parse_at(line)
        except wire.ParseError:
            return wire.AT_ERROR
        if isinstance(cmd, wire.AtName):
            self.config = replace(self.config, name=cmd.name)
        elif isinstance(cmd, wire.AtPassword):
            self.config = replace(self.config, password=cmd.pin)
        elif isinstance(cmd, wire.AtRole):
            self.config = replace(self.config, role=cmd.role)
        return wire.AT_OK

    def handle_command(self, cmd) -> str:
        if self.mode is not Mode.DATA:
            raise ProtocolStateError("data commands are only accepted in data mode")
        if isinstance(cmd, str):
            cmd = wire.Verb(cmd)
        if cmd is wire.Verb.RELAY_ON:
            self.set_relay(True)
            return "OK"
        if cmd is wire.Verb.RELAY_OFF:
            self.set_relay(False)
            return "OK"
        if cmd is wire.Verb.READ:
            m = self.latest
            return "BUSY" if m is None else m.to_json()
        if cmd is wire.Verb.STATUS:
            state = "on" if self.relay_closed else "off"
            return f"STATUS relay={state} uptime_us={self.uptime_us}"
        raise ProtocolStateError(f"not a data command: {cmd!r}")

    def handle_line(self, line) -> str:
        """Response to one received line, as the serial endpoint sends it back."""
        if isinstance(line, (bytes, bytearray)):
            try:
                line = wire.decode_frame(bytes(line) if bytes(line).endswith(b"\n") else bytes(line) + b"\n")
            except wire.FrameError as exc:
                return wire.AT_ERROR if self.mode is Mode.AT else f"ERROR frame {exc}"
        if self.mode is Mode.AT:
            return self.handle_at(line)
        try:
            cmd = wire.parse_payload(line)
        except wire.ParseError as exc:
            return f"ERROR parse {exc.token}"
        if not isinstance(cmd, wire.Verb):
            return "ERROR mode"
        return self.handle_command(cmd)

    def feed(self, data: bytes, buffer: wire.LineBuffer) -> bytes:
        """Process raw bytes from the link; returns the framed replies."""
        out = b""
        for frame in buffer.feed(data):
            out += wire.encode_frame(self.handle_line(frame))
        return out

    # -- virtual time ----------------------------------------------------------------

    def _pairs_due(self, now_us: int) -> int:
        timing = self.scenario.timing
        elapsed = now_us - self._acq_start - timing.skew_us
        return 0 if elapsed < 0 else elapsed // self._period + 1

    def _window_end(self, m: int) -> int:
        # Index of the first pair after window m.
        return -(-((m + 1) * self._window_us) // self._period)

    def idle_until(self, now_us: int):
        """Advance the clock without sampling and restart acquisition at ``now_us``.

        The offset filter and the window grid restart too, so the next
        measurement needs a fresh warm-up.
        """
        now_us = int(now_us)
        if now_us < self.clock_us:
            raise ValueError("virtual time cannot go backwards")
        self.clock_us = now_us
        self._start_acquisition(now_us)

    def tick(self, now_us: int) -> Optional[Measurement]:
        """Consume every sample due by ``now_us``; returns the newest measurement
        produced by this call, if any."""
        if self.mode is not Mode.DATA:
            raise ProtocolStateError("the metering loop only runs in data mode")
        now_us = int(now_us)
        if now_us < self.clock_us:
            raise ValueError("virtual time cannot go backwards")
        self.clock_us = now_us
        due = self._pairs_due(now_us)
        newest = None
        while self._k_done < due:
            k_end = min(due, self._window_end(self._windows_done))
            self._take(self._k_done, k_end)
            if k_end == self._window_end(self._windows_done):
                m = self._measure_window()
                self._windows_done += 1
                if m is not None:
                    newest = m
        return newest

    def _take(self, k0: int, k1: int):
        p = self._sampler.pairs(k0, k1, self.relay_closed)
        chunk = (p.t_v, p.v_code, p.v_sat, p.t_i, p.i_code, p.i_sat)
        if self.keep_samples:
            self._recorded.append(chunk + (np.full(k1 - k0, self.relay_closed),))
        if self._buf is None:
            self._buf = chunk
        else:
            self._buf = tuple(np.concatenate([a, b]) for a, b in zip(self._buf, chunk))
        keep = self.offset_window + self._window_end(0) + 4
        if len(self._buf[0]) > 2 * keep:
            self._buf = tuple(a[-keep:] for a in self._buf)
        self._k_done = k1

    def _measure_window(self) -> Optional[Measurement]:
        k_start = self._window_end(self._windows_done - 1) if self._windows_done else 0
        n_win = self._k_done - k_start
        t_v, v_code, v_sat, t_i, i_code, i_sat = self._buf
        hist = min(len(t_v), n_win + self.offset_window)
        sl = slice(len(t_v) - hist, None)
        v = ChannelStream("V", t_v[sl], v_code[sl], v_sat[sl])
        i = ChannelStream("I", t_i[sl], i_code[sl], i_sat[sl])
        start = int(t_v[len(t_v) - n_win])
        try:
            m = measure(
                v,
                i,
                self.scenario.chain,
                self.scenario.waveform.freq_hz,
                adc=self.scenario.adc,
                start_us=start,
                compensate_skew=self.compensate_skew,
                offset_window=self.offset_window,
            )
        except InsufficientDataError as exc:
            log.warning("window ending %s skipped: %s", int(t_v[-1]), exc)
            return None
        if m.irms > self.relay_rating_a:
            m = replace(m, out_of_spec=True)
            if self.auto_trip:
                self.set_relay(False)
        # Stamped when the window's last sample was taken, not when tick ran.
        self._log.append(LogRecord(int(t_i[-1]), self.scenario.id, m))
        return m

    def recorded_samples(self) -> tuple[SampleStream, np.ndarray]:
        """All samples taken since power-on (``keep_samples=True`` only) and the
        relay state of each pair."""
        if not self.keep_samples:
            raise ConfigurationError("plug was created with keep_samples=False")
        if not self._recorded:
            empty = SampleStream(ChannelStream.empty("V"), ChannelStream.empty("I"))
            return empty, np.zeros(0, bool)
        cols = [np.concatenate(c) for c in zip(*self._recorded)]
        t_v, v_code, v_sat, t_i, i_code, i_sat, relay = cols
        return (
            SampleStream(ChannelStream("V", t_v, v_code, v_sat), ChannelStream("I", t_i, i_code, i_sat)),
            relay,
        )
