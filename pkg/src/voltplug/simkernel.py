"""Deterministic model of the mains waveform, the sensors and the 10-bit ADC.

Everything here is a pure function of its inputs.  The only randomness is
line-referred Gaussian noise, drawn from generators keyed by
``(seed, start_us, block)`` so that a stream is identical no matter how it is
chunked by the caller.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigurationError

SQRT2 = math.sqrt(2.0)
NOISE_BLOCK = 1024

LOAD_KINDS = ("resistive", "inductive", "switched")
VOLTAGE_MODES = ("ideal", "empirical")


@dataclass(frozen=True)
class Harmonic:
    order: int
    rel_amplitude: float
    phase_deg: float = 0.0


@dataclass(frozen=True)
class LoadModel:
    """Load attached to the plug.

    ``irms`` is the RMS of the fundamental current component.  For a switched
    load the total RMS is ``irms * sqrt(1 + sum(a**2))`` over the declared
    harmonics.  ``phase_deg`` is the angle by which the fundamental current
    lags the voltage.
    """

    kind: str = "resistive"
    resistance: float | None = None
    phase_deg: float = 0.0
    irms: float = 0.0
    harmonics: tuple[Harmonic, ...] = ()

    def __post_init__(self):
        if self.kind not in LOAD_KINDS:
            raise ConfigurationError(f"unknown load kind {self.kind!r}")
        object.__setattr__(
            self,
            "harmonics",
            tuple(h if isinstance(h, Harmonic) else Harmonic(*h) for h in self.harmonics),
        )
        if self.kind == "resistive":
            if self.resistance is None or not self.resistance > 0:
                raise ConfigurationError("resistive load needs resistance > 0")
        if not 0 <= self.phase_deg < 90:
            raise ConfigurationError("phase_deg must lie in [0, 90)")
        if self.kind == "inductive" and self.phase_deg == 0:
            raise ConfigurationError("inductive load needs 0 < phase_deg < 90")
        if self.irms < 0:
            raise ConfigurationError("irms must be >= 0")
        orders = [h.order for h in self.harmonics]
        if len(set(orders)) != len(orders):
            raise ConfigurationError("harmonic orders must be distinct")
        for h in self.harmonics:
            if h.order < 3 or h.order % 2 == 0:
                raise ConfigurationError(f"harmonic order {h.order} must be odd and >= 3")
            if not 0 <= h.rel_amplitude <= 1:
                raise ConfigurationError("harmonic relative amplitude must lie in [0, 1]")


@dataclass(frozen=True)
class NoiseModel:
    sigma_v: float = 0.0
    sigma_i: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_v < 0 or self.sigma_i < 0:
            raise ConfigurationError("noise sigmas must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class DriftModel:
    """Slow sinusoidal wander of the line RMS voltage.

    Over any whole number of drift periods the drift averages to zero, so a
    batch of readings evenly spread across one period has the nominal mean.
    """

    amplitude_v: float = 0.0
    period_s: float = 1800.0
    phase_deg: float = 0.0

    def __post_init__(self):
        if self.amplitude_v < 0 or not self.period_s > 0:
            raise ConfigurationError("drift needs amplitude_v >= 0 and period_s > 0")

    def offset(self, t_us):
        return self.amplitude_v * np.sin(
            2 * np.pi * np.asarray(t_us, dtype=float) / (self.period_s * 1e6)
            + math.radians(self.phase_deg)
        )


@dataclass(frozen=True)
class WaveformSpec:
    vrms: float = 127.0
    freq_hz: float = 60.0
    phase0_deg: float = 0.0
    load: LoadModel = field(default_factory=lambda: LoadModel(resistance=100.0))
    noise: NoiseModel = field(default_factory=NoiseModel)
    drift: DriftModel = field(default_factory=DriftModel)

    def __post_init__(self):
        if not self.vrms > 0:
            raise ConfigurationError("vrms must be > 0")
        if not self.freq_hz > 0:
            raise ConfigurationError("freq_hz must be > 0")

    @property
    def period_us(self) -> float:
        return 1e6 / self.freq_hz


@dataclass(frozen=True)
class SensorChain:
    """Transfer constants of the current and voltage sensing paths.

    ``voltage_mode`` selects the voltage transfer: ``"ideal"`` composes the
    100:6 transformer with the resistive divider, ``"empirical"`` uses the
    bench-calibrated ``k_v_empirical_mv_per_v`` directly.
    """

    acs_sensitivity_mv_per_a: float = 66.0
    acs_vcc_mv: float = 5000.0
    acs_quiescent_mv: float | None = None
    xfmr_ratio: float = 6 / 100
    divider_gain: float = 1.2 / 13.2
    dc_level_mv: float = 2500.0
    k_v_empirical_mv_per_v: float = 5.2
    voltage_mode: str = "ideal"

    def __post_init__(self):
        if self.acs_quiescent_mv is None:
            object.__setattr__(self, "acs_quiescent_mv", self.acs_vcc_mv / 2)
        if self.acs_sensitivity_mv_per_a not in (185.0, 100.0, 66.0):
            raise ConfigurationError("ACS712 sensitivity must be 185, 100 or 66 mV/A")
        if not 0 < self.xfmr_ratio < 1:
            raise ConfigurationError("xfmr_ratio must lie in (0, 1)")
        if not 0 < self.divider_gain < 1:
            raise ConfigurationError("divider_gain must lie in (0, 1)")
        if not 0 < self.dc_level_mv < self.acs_vcc_mv:
            raise ConfigurationError("dc_level_mv must lie inside the supply range")
        if not self.k_v_empirical_mv_per_v > 0:
            raise ConfigurationError("k_v_empirical_mv_per_v must be > 0")
        if self.voltage_mode not in VOLTAGE_MODES:
            raise ConfigurationError(f"unknown voltage_mode {self.voltage_mode!r}")

    @property
    def voltage_gain_mv_per_v(self) -> float:
        """Millivolts at the ADC pin per volt on the line (DC level excluded)."""
        if self.voltage_mode == "empirical":
            return self.k_v_empirical_mv_per_v
        return 1000.0 * self.xfmr_ratio * self.divider_gain


@dataclass(frozen=True)
class AdcModel:
    bits: int = 10
    vref_mv: float = 5000.0

    def __post_init__(self):
        if not 1 <= self.bits <= 24 or not self.vref_mv > 0:
            raise ConfigurationError("ADC needs 1 <= bits <= 24 and vref_mv > 0")

    @property
    def levels(self) -> int:
        return 1 << self.bits

    @property
    def max_code(self) -> int:
        return self.levels - 1

    @property
    def lsb_mv(self) -> float:
        return self.vref_mv / self.levels


@dataclass(frozen=True)
class SamplerTiming:
    """Sequential sampling schedule: voltage at ``start + k*period``, the paired
    current reading ``skew_us`` later."""

    period_us: int = 500
    skew_us: int = 112
    start_us: int = 0

    def __post_init__(self):
        for name in ("period_us", "skew_us", "start_us"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ConfigurationError(f"{name} must be an integer")
        if not self.period_us > self.skew_us >= 0:
            raise ConfigurationError("timing needs period_us > skew_us >= 0")
        if self.start_us < 0:
            raise ConfigurationError("start_us must be >= 0")


class Sample(NamedTuple):
    t_us: int
    channel: str
    code: int
    saturated: bool = False


@dataclass(frozen=True, eq=False)
class ChannelStream:
    """Samples of one channel, held as parallel numpy arrays."""

    channel: str
    t_us: np.ndarray
    code: np.ndarray
    saturated: np.ndarray

    def __len__(self):
        return len(self.t_us)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return ChannelStream(self.channel, self.t_us[idx], self.code[idx], self.saturated[idx])
        return Sample(int(self.t_us[idx]), self.channel, int(self.code[idx]), bool(self.saturated[idx]))

    def __eq__(self, other):
        return (
            isinstance(other, ChannelStream)
            and self.channel == other.channel
            and np.array_equal(self.t_us, other.t_us)
            and np.array_equal(self.code, other.code)
            and np.array_equal(self.saturated, other.saturated)
        )

    @classmethod
    def empty(cls, channel: str) -> "ChannelStream":
        return cls(channel, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, bool))

    @classmethod
    def concat(cls, parts: list["ChannelStream"]) -> "ChannelStream":
        channel = parts[0].channel
        return cls(
            channel,
            np.concatenate([p.t_us for p in parts]),
            np.concatenate([p.code for p in parts]),
            np.concatenate([p.saturated for p in parts]),
        )


@dataclass(frozen=True, eq=False)
class SampleStream:
    voltage: ChannelStream
    current: ChannelStream

    def __eq__(self, other):
        return (
            isinstance(other, SampleStream)
            and self.voltage == other.voltage
            and self.current == other.current
        )

    def __iter__(self) -> Iterator[Sample]:
        """Yield samples in time order; a voltage sample precedes a current
        sample carrying the same timestamp."""
        rows = [self.voltage[k] for k in range(len(self.voltage))]
        rows += [self.current[k] for k in range(len(self.current))]
        rows.sort(key=lambda s: (s.t_us, s.channel != "V"))
        return iter(rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t_us", "channel", "code", "saturated"])
        for s in self:
            writer.writerow([s.t_us, s.channel, s.code, int(s.saturated)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SampleStream":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != ["t_us", "channel", "code", "saturated"]:
            raise ConfigurationError(f"unexpected CSV header {reader.fieldnames}")
        cols = {"V": ([], [], []), "I": ([], [], [])}
        for row in reader:
            if row["channel"] not in cols:
                raise ConfigurationError(f"unknown channel {row['channel']!r}")
            t, c, s = cols[row["channel"]]
            t.append(int(row["t_us"]))
            c.append(int(row["code"]))
            s.append(row["saturated"] in ("1", "true", "True"))
        streams = {
            ch: ChannelStream(
                ch, np.array(t, np.int64), np.array(c, np.int64), np.array(s, bool)
            )
            for ch, (t, c, s) in cols.items()
        }
        return cls(streams["V"], streams["I"])


def _cycle_phase(spec: WaveformSpec, t_us):
    # Reduce f*t modulo one second of microseconds first; keeps the phase
    # exact for long virtual times.
    cycles = np.mod(spec.freq_hz * np.asarray(t_us, dtype=float), 1e6) / 1e6
    return 2 * np.pi * cycles + math.radians(spec.phase0_deg)


def line_vrms(spec: WaveformSpec, t_us=0.0):
    """True RMS of the line voltage at ``t_us`` (nominal plus drift)."""
    return spec.vrms + spec.drift.offset(t_us)


def load_irms(spec: WaveformSpec, t_us=0.0):
    """True RMS of the load current, harmonics included."""
    load = spec.load
    if load.kind == "resistive":
        return line_vrms(spec, t_us) / load.resistance
    extra = sum(h.rel_amplitude**2 for h in load.harmonics) if load.kind == "switched" else 0.0
    return load.irms * math.sqrt(1.0 + extra) + 0.0 * np.asarray(t_us, dtype=float)


def instantaneous(spec: WaveformSpec, t_us):
    """Noise-free line voltage and load current at ``t_us`` (scalar or array)."""
    theta = _cycle_phase(spec, t_us)
    v = SQRT2 * line_vrms(spec, t_us) * np.sin(theta)
    load = spec.load
    if load.kind == "resistive":
        i = v / load.resistance
    else:
        lag = math.radians(load.phase_deg)
        i = np.sin(theta - lag)
        if load.kind == "switched":
            for h in load.harmonics:
                i = i + h.rel_amplitude * np.sin(h.order * (theta - lag) + math.radians(h.phase_deg))
        i = SQRT2 * load.irms * i
    if np.ndim(v) == 0:
        return float(v), float(i)
    return v, i


def sense(v_line, i_line, chain: SensorChain):
    """Sensor outputs in millivolts at the two ADC pins."""
    i_mv = chain.acs_quiescent_mv + chain.acs_sensitivity_mv_per_a * np.asarray(i_line, dtype=float)
    v_mv = chain.dc_level_mv + chain.voltage_gain_mv_per_v * np.asarray(v_line, dtype=float)
    if np.ndim(v_mv) == 0 and np.ndim(i_mv) == 0:
        return float(v_mv), float(i_mv)
    return v_mv, i_mv


def _raw_code(volts_mv, adc: AdcModel):
    return np.floor(np.asarray(volts_mv, dtype=float) * adc.levels / adc.vref_mv)


def quantize(volts_mv, adc: AdcModel = AdcModel()):
    """ADC code for a pin voltage, clamped to ``[0, 2**bits - 1]``."""
    code = np.clip(_raw_code(volts_mv, adc), 0, adc.max_code).astype(np.int64)
    return int(code) if code.ndim == 0 else code


def saturates(volts_mv, adc: AdcModel = AdcModel()):
    raw = _raw_code(volts_mv, adc)
    flag = (raw < 0) | (raw > adc.max_code)
    return bool(flag) if flag.ndim == 0 else flag


class SampledPairs(NamedTuple):
    t_v: np.ndarray
    t_i: np.ndarray
    v_line: np.ndarray
    i_line: np.ndarray
    v_code: np.ndarray
    i_code: np.ndarray
    v_sat: np.ndarray
    i_sat: np.ndarray


class Sampler:
    """Produces the k-th voltage/current sample pair on demand.

    Pair ``k`` is fully determined by the configuration, the noise seed and
    ``k`` itself, so any chunking of ``pairs`` yields the same data.
    """

    def __init__(self, spec: WaveformSpec, chain: SensorChain, adc: AdcModel, timing: SamplerTiming):
        self.spec = spec
        self.chain = chain
        self.adc = adc
        self.timing = timing

    def times(self, k0: int, k1: int):
        k = np.arange(k0, k1, dtype=np.int64)
        t_v = self.timing.start_us + k * self.timing.period_us
        return t_v, t_v + self.timing.skew_us

    def _noise(self, k0: int, k1: int) -> np.ndarray:
        out = np.empty((k1 - k0, 2))
        noise = self.spec.noise
        if noise.sigma_v == 0 and noise.sigma_i == 0:
            out[:] = 0.0
            return out
        pos = k0
        while pos < k1:
            block = pos // NOISE_BLOCK
            rng = np.random.default_rng([noise.seed, self.timing.start_us, block])
            draws = rng.standard_normal((NOISE_BLOCK, 2))
            lo = pos - block * NOISE_BLOCK
            hi = min(NOISE_BLOCK, k1 - block * NOISE_BLOCK)
            out[pos - k0 : pos - k0 + hi - lo] = draws[lo:hi]
            pos += hi - lo
        out[:, 0] *= noise.sigma_v
        out[:, 1] *= noise.sigma_i
        return out

    def pairs(self, k0: int, k1: int, relay_closed=True) -> SampledPairs:
        """Sample pairs ``k0 <= k < k1``.

        ``relay_closed`` is a bool or a per-pair boolean array; an open relay
        forces the line current, noise included, to exactly zero.
        """
        if k1 < k0 or k0 < 0:
            raise ConfigurationError("invalid pair range")
        t_v, t_i = self.times(k0, k1)
        noise = self._noise(k0, k1)
        v_line, _ = instantaneous(self.spec, t_v)
        _, i_line = instantaneous(self.spec, t_i)
        v_line = np.asarray(v_line) + noise[:, 0]
        closed = np.broadcast_to(np.asarray(relay_closed, dtype=bool), t_v.shape)
        i_line = np.where(closed, np.asarray(i_line) + noise[:, 1], 0.0)
        v_mv, _ = sense(v_line, 0.0 * v_line, self.chain)
        _, i_mv = sense(0.0 * i_line, i_line, self.chain)
        return SampledPairs(
            t_v,
            t_i,
            v_line,
            i_line,
            np.atleast_1d(quantize(v_mv, self.adc)),
            np.atleast_1d(quantize(i_mv, self.adc)),
            np.atleast_1d(saturates(v_mv, self.adc)),
            np.atleast_1d(saturates(i_mv, self.adc)),
        )

    def stream(self, k0: int, k1: int, relay_closed=True) -> SampleStream:
        p = self.pairs(k0, k1, relay_closed)
        return SampleStream(
            ChannelStream("V", p.t_v, p.v_code, p.v_sat),
            ChannelStream("I", p.t_i, p.i_code, p.i_sat),
        )


def pair_count(timing: SamplerTiming, duration_us) -> int:
    """Number of voltage sample instants inside ``[start, start + duration)``."""
    return -(-int(duration_us) // timing.period_us)


def run_sampler(spec, chain, adc, timing, duration_us) -> SampleStream:
    if duration_us < timing.period_us:
        raise ConfigurationError("duration_us must be >= period_us")
    return Sampler(spec, chain, adc, timing).stream(0, pair_count(timing, duration_us))


# -- scenario documents -------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Everything the simulator needs, as stored in a scenario JSON file."""

    id: str = "default"
    waveform: WaveformSpec = field(default_factory=WaveformSpec)
    chain: SensorChain = field(default_factory=SensorChain)
    adc: AdcModel = field(default_factory=AdcModel)
    timing: SamplerTiming = field(default_factory=SamplerTiming)

    def with_seed(self, seed: int) -> "Scenario":
        noise = replace(self.waveform.noise, seed=int(seed))
        return replace(self, waveform=replace(self.waveform, noise=noise))

    def with_timing(self, **changes) -> "Scenario":
        return replace(self, timing=replace(self.timing, **changes))

    def sampler(self) -> Sampler:
        return Sampler(self.waveform, self.chain, self.adc, self.timing)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["waveform"]["load"]["harmonics"] = [
            asdict(h) for h in self.waveform.load.harmonics
        ]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            wf = dict(data.get("waveform", {}))
            load = dict(wf.pop("load", {}))
            load["harmonics"] = tuple(Harmonic(**h) for h in load.get("harmonics", ()))
            waveform = WaveformSpec(
                load=LoadModel(**load),
                noise=NoiseModel(**wf.pop("noise", {})),
                drift=DriftModel(**wf.pop("drift", {})),
                **wf,
            )
            return cls(
                id=str(data.get("id", "scenario")),
                waveform=waveform,
                chain=SensorChain(**data.get("chain", {})),
                adc=AdcModel(**data.get("adc", {})),
                timing=SamplerTiming(**data.get("timing", {})),
            )
        except TypeError as exc:
            raise ConfigurationError(f"bad scenario document: {exc}") from None


def load_scenario(path) -> Scenario:
    """Load a scenario from a JSON file, or a bundled one by bare name."""
    p = Path(path)
    if not p.exists():
        bundled = Path(__file__).parent / "scenarios" / f"{p.stem}.json"
        if p.parent == Path(".") and bundled.exists():
            p = bundled
        else:
            raise ConfigurationError(f"scenario file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return Scenario.from_dict(data)
