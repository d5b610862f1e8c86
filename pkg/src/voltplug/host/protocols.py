"""Validation protocols: repeated readings turned into statistical reports.

Readings are spread over virtual time, and each one starts acquisition at a
seeded random offset within one sampling period.  Without that jitter a
2 kHz sampler locked to 60 Hz mains sees the same three-cycle pattern of
quantization errors at every reading, and the batch would not average them.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np

from ..device import VirtualPlug
from ..errors import InsufficientDataError, PairingError, PreconditionError
from ..metering import (
    DEFAULT_HYSTERESIS,
    DEFAULT_OFFSET_WINDOW,
    Measurement,
    code_to_current,
    code_to_line_voltage,
    find_crossings,
    lag,
    pair_crossings,
    remove_offset,
    rms_from_peak,
)
from ..simkernel import Scenario, line_vrms
from .link import InProcessLink

ESTIMATOR = "population"
READING_STRIDE_US = 1_000_000


def stats(values) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise InsufficientDataError("statistics need at least 2 values")
    return float(x.mean()), float(x.std(ddof=0))


@dataclass(frozen=True)
class ValidationReport:
    protocol: str
    label: str
    unit: str
    n: int
    mean: float
    std_dev: float
    reference: Optional[float] = None
    error_abs: Optional[float] = None
    error_pct: Optional[float] = None
    estimator: str = ESTIMATOR

    def __post_init__(self):
        if self.n < 2:
            raise InsufficientDataError("a report needs n >= 2")
        if self.reference is None and (self.error_abs is not None or self.error_pct is not None):
            raise ValueError("error fields need a reference value")

    @classmethod
    def from_values(cls, protocol, label, unit, values, reference=None, error_pct=None):
        mean, std = stats(values)
        err = None if reference is None else mean - reference
        if reference is not None and error_pct is None:
            error_pct = 100.0 * abs(err) / abs(reference) if reference else None
        return cls(protocol, label, unit, len(values), mean, std, reference, err, error_pct)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


_COLUMNS = ("protocol", "label", "n", "mean", "std_dev", "reference", "error_abs", "error_pct", "unit")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def render_table(reports) -> str:
    rows = [_COLUMNS] + [tuple(_fmt(getattr(r, c)) for c in _COLUMNS) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(_COLUMNS))]
    lines = [f"# std_dev estimator: {ESTIMATOR} (divisor n)"]
    for row in rows:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def render_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2) + "\n"


def render_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_COLUMNS + ("estimator",))
    for r in reports:
        row = [getattr(r, c) for c in _COLUMNS]
        w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row] + [r.estimator])
    return buf.getvalue()


def _jitter(scenario: Scenario, k: int) -> int:
    rng = np.random.default_rng([scenario.waveform.noise.seed, k])
    return int(rng.integers(0, scenario.timing.period_us))


# -- lag ------------------------------------------------------------------------


def capture_pairs(scenario: Scenario, cycles: int = 2, offset_window: int = DEFAULT_OFFSET_WINDOW) -> int:
    """Pairs per lag capture: filter warm-up plus ``cycles`` mains cycles."""
    span = cycles * 1e6 / scenario.waveform.freq_hz
    return offset_window + math.ceil(span / scenario.timing.period_us)


def zero_pass_lag(
    scenario: Scenario,
    start_us: int,
    *,
    compensate_skew: bool = True,
    offset_window: int = DEFAULT_OFFSET_WINDOW,
    hysteresis: float = DEFAULT_HYSTERESIS,
    relay_closed: bool = True,
) -> float:
    """One lag reading in degrees from the first zero pass after warm-up.

    Both channels go through the moving-average offset filter.  Without skew
    compensation each current sample is stamped with the instant of the
    voltage sample taken just before it.
    """
    sc = scenario.with_timing(start_us=int(start_us))
    p = sc.sampler().pairs(0, capture_pairs(sc, offset_window=offset_window), relay_closed)
    v = remove_offset(p.t_v, code_to_line_voltage(p.v_code, sc.chain, sc.adc), offset_window).settled
    t_i = p.t_i if compensate_skew else p.t_v
    i = remove_offset(t_i, code_to_current(p.i_code, sc.chain.acs_sensitivity_mv_per_a, sc.adc), offset_window).settled
    i_amp = float(np.max(np.abs(i.value)))
    if i_amp == 0.0:
        raise InsufficientDataError(f"no current zero passes in capture at {start_us} us")
    vc = find_crossings(v.t_us, v.value, hysteresis * float(np.max(np.abs(v.value))))
    ic = find_crossings(i.t_us, i.value, hysteresis * i_amp)
    try:
        zc, zv = pair_crossings(vc, ic, scenario.waveform.freq_hz)[0]
    except (PairingError, IndexError):
        raise InsufficientDataError(f"no paired zero passes in capture at {start_us} us") from None
    return lag(zc, zv, scenario.waveform.freq_hz).phi_deg


def lag_readings(scenario: Scenario, n: int = 30, **kw) -> list[float]:
    return [
        zero_pass_lag(scenario, k * READING_STRIDE_US + _jitter(scenario, k), **kw)
        for k in range(n)
    ]


def run_lag_protocol(scenario: Scenario, n: int = 30, *, compensate_skew: bool = True) -> ValidationReport:
    """Lag in degrees from ``n`` zero-pass readings one virtual second apart.

    The reference is the configured load angle, 0 for a resistive load.
    """
    values = lag_readings(scenario, n, compensate_skew=compensate_skew)
    ref = float(scenario.waveform.load.phase_deg)
    mean, std = stats(values)
    err_pct = None if ref == 0 else 100.0 * abs(mean - ref) / ref
    return ValidationReport("lag", scenario.waveform.load.kind, "deg", n, mean, std, ref, mean - ref, err_pct)


# -- readings over the serial link ------------------------------------------


def _measurement_readings(scenario: Scenario, n: int, interval_s: float, warmup_windows: int = 2):
    """Drive a virtual plug over the link: close the relay, then take ``n``
    READs spaced ``interval_s`` apart in virtual time.

    Each reading restarts acquisition and reports the first window that has
    a full offset-filter history behind it.  Returns (scheduled time,
    measurement) pairs.
    """
    plug = VirtualPlug(scenario)
    link = InProcessLink(plug)
    if link.request("RELAY ON") != "OK":
        raise PreconditionError("plug refused RELAY ON")
    freq = scenario.waveform.freq_hz
    window_us = plug.window_cycles * 1e6 / freq
    interval_us = int(round(interval_s * 1e6))
    t0 = scenario.timing.start_us
    out = []
    for k in range(n):
        t_sched = t0 + k * interval_us
        start = t_sched + _jitter(scenario, k)
        plug.idle_until(start)
        plug.tick(start + math.ceil((warmup_windows + 1) * window_us) + scenario.timing.skew_us + scenario.timing.period_us)
        reply = link.request("READ")
        if reply == "BUSY":
            raise InsufficientDataError(f"no measurement available for reading {k}")
        out.append((t_sched, Measurement.from_json(reply)))
    return out


class RmsReports(NamedTuple):
    truth: ValidationReport
    peak: ValidationReport
    direct: ValidationReport

    @property
    def ordered(self) -> bool:
        """Direct method closer to the truth than the peak method."""
        return abs(self.direct.error_abs) < abs(self.peak.error_abs)

    def __str__(self):
        return render_table(self)


def run_rms_protocol(scenario: Scenario, n: int = 30, interval_virtual_s: float = 60.0) -> RmsReports:
    """Line RMS voltage by three methods.

    The simulator's line RMS at each scheduled reading instant plays the
    multimeter.  The peak method divides the largest offset-filtered sample
    of the window by sqrt(2); the direct method is the plug's own RMS.
    """
    rows = _measurement_readings(scenario, n, interval_virtual_s)
    truth = [float(line_vrms(scenario.waveform, t)) for t, _ in rows]
    peaks = []
    for t, m in rows:
        if m.v_peak is None:
            raise InsufficientDataError(f"reading at {t} us has no settled peak")
        peaks.append(rms_from_peak(m.v_peak))
    direct = [m.vrms for _, m in rows]
    ref = float(scenario.waveform.vrms)
    truth_rep = ValidationReport.from_values("rms", "truth", "V", truth, ref)
    t_mean = truth_rep.mean
    return RmsReports(
        truth_rep,
        ValidationReport.from_values("rms", "peak", "V", peaks, t_mean),
        ValidationReport.from_values("rms", "direct", "V", direct, t_mean),
    )


def run_power_protocol(scenario: Scenario, n: int = 30, interval_virtual_s: float = 60.0) -> ValidationReport:
    """Difference between apparent and active power on a resistive load.

    ``error_pct`` is the mean difference relative to the mean apparent power.
    """
    if scenario.waveform.load.kind != "resistive":
        raise PreconditionError(
            f"power protocol needs a resistive load, got {scenario.waveform.load.kind!r}"
        )
    rows = _measurement_readings(scenario, n, interval_virtual_s)
    d = [m.s_apparent - m.p_active for _, m in rows]
    s_mean = float(np.mean([m.s_apparent for _, m in rows]))
    mean = float(np.mean(d))
    pct = 100.0 * mean / s_mean if s_mean > 0 else None
    return ValidationReport.from_values("power", "s-p", "VA", d, 0.0, error_pct=pct)
