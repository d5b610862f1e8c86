"""Signal chain of the plug firmware.

Raw ADC codes are converted to line quantities, the sensor offset is removed,
zero crossings are located by two-point interpolation, and RMS, active,
apparent and reactive power are computed over whole mains cycles.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (
    DomainError,
    InconsistencyError,
    InsufficientDataError,
    InvalidPairError,
    PairingError,
)
from .simkernel import AdcModel, ChannelStream, SensorChain

DEFAULT_OFFSET_WINDOW = 70
DEFAULT_HYSTERESIS = 0.1
WIRE_DIGITS = 9


# -- code conversion -----------------------------------------------------------


def adc_to_millivolts(code, adc: AdcModel = AdcModel()) -> float:
    """Pin voltage in millivolts for an integer ADC code: ``code / 2**bits * vref``."""
    if isinstance(code, bool) or int(code) != code:
        raise DomainError(f"ADC code must be an integer, got {code!r}")
    code = int(code)
    if not 0 <= code <= adc.max_code:
        raise DomainError(f"ADC code {code} outside [0, {adc.max_code}]")
    return float(Fraction(code, adc.levels) * Fraction(adc.vref_mv))


def codes_to_millivolts(codes, adc: AdcModel = AdcModel()) -> np.ndarray:
    """Vectorised ``adc_to_millivolts``.

    With an integral ``vref_mv`` the product ``code * vref`` is an integer
    below 2**53 and the division by ``2**bits`` is exact, so this agrees
    bit-for-bit with the rational scalar version.
    """
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > adc.max_code):
        raise DomainError(f"ADC codes outside [0, {adc.max_code}]")
    return codes.astype(np.float64) * adc.vref_mv / adc.levels


def code_to_current(code, sensitivity_mv_per_a: float, adc: AdcModel = AdcModel()):
    """Offset-bearing current in amperes from an ACS712 code."""
    if not sensitivity_mv_per_a > 0:
        raise DomainError("sensitivity must be > 0")
    if np.ndim(code) == 0:
        return adc_to_millivolts(code, adc) / sensitivity_mv_per_a
    return codes_to_millivolts(code, adc) / sensitivity_mv_per_a


def code_to_line_voltage(code, chain: SensorChain, adc: AdcModel = AdcModel()):
    """Offset-bearing line voltage from a voltage-sensor code.

    The DC bias of the sensor stays in the result and is removed later by the
    offset filter, exactly as for the current channel.
    """
    mv = adc_to_millivolts(code, adc) if np.ndim(code) == 0 else codes_to_millivolts(code, adc)
    return mv / chain.voltage_gain_mv_per_v


# -- offset removal ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CenteredSeries:
    t_us: np.ndarray
    value: np.ndarray
    window: int = DEFAULT_OFFSET_WINDOW
    warmup: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.t_us, dtype=float)
        object.__setattr__(self, "t_us", t)
        object.__setattr__(self, "value", np.asarray(self.value, dtype=float))
        if self.warmup is None:
            object.__setattr__(self, "warmup", np.zeros(len(t), bool))
        if len(t) != len(self.value):
            raise DomainError("time and value arrays differ in length")
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise DomainError("t_us must be strictly increasing")

    def __len__(self):
        return len(self.t_us)

    @property
    def settled(self) -> "CenteredSeries":
        """The points past the warm-up region."""
        keep = ~self.warmup
        return CenteredSeries(self.t_us[keep], self.value[keep], self.window)


def remove_offset(t_us, values, window: int = DEFAULT_OFFSET_WINDOW) -> CenteredSeries:
    """Subtract the moving average of the last ``window`` raw values.

    The first ``window - 1`` points only see a partial window; they are still
    centred on what is available but flagged as warm-up.
    """
    values = np.asarray(values, dtype=float)
    if window < 1:
        raise DomainError("window must be >= 1")
    if len(values) < window:
        raise InsufficientDataError(f"need at least {window} samples, got {len(values)}")
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(len(values))
    lo = np.maximum(idx + 1 - window, 0)
    mean = (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)
    warm = idx < window - 1
    return CenteredSeries(np.asarray(t_us, dtype=float), values - mean, window, warm)


def filter_gain(freq_hz: float, period_us: float, window: int = DEFAULT_OFFSET_WINDOW) -> float:
    """Magnitude response of ``remove_offset`` for a sinusoid at ``freq_hz``.

    Closed form ``|1 - D(w)|`` with ``D`` the normalised Dirichlet kernel of
    the trailing mean.  Unity when the window spans whole cycles.
    """
    w = 2 * math.pi * freq_hz * period_us * 1e-6
    if math.isclose(math.sin(w / 2), 0.0, abs_tol=1e-15):
        return 0.0
    k = np.arange(window)
    mean_response = np.exp(-1j * w * k).sum() / window
    return float(abs(1 - mean_response))


# -- zero crossings -------------------------------------------------------------


@dataclass(frozen=True)
class CrossingPair:
    """Last positive and first negative samples around a falling zero."""

    vp: float
    vn: float
    tp_us: float
    tn_us: float

    def __post_init__(self):
        if not (self.vp > 0 > self.vn):
            raise InvalidPairError(f"need vp > 0 > vn, got vp={self.vp} vn={self.vn}")
        if not self.tn_us > self.tp_us:
            raise InvalidPairError("need tn_us > tp_us")


def zero_crossing(pair: CrossingPair) -> float:
    """Instant where the line through the pair meets zero.

    Evaluated as the expanded rational expression used by the firmware, in
    exact arithmetic so the result is the correctly rounded crossing time.
    """
    vp, vn = Fraction(pair.vp), Fraction(pair.vn)
    tp, tn = Fraction(pair.tp_us), Fraction(pair.tn_us)
    num = -(tp * tn * vp) + (vp * tn**2) + (vn * tp**2) - (vn * tp * tn)
    den = (vp * tn) - (tn * vn) - (tp * vp) + (tp * vn)
    return float(num / den)


class Crossing(NamedTuple):
    t_us: float
    rising: bool


def _falling_pairs(t, x, hysteresis):
    out = []
    armed = False
    last_pos = -1
    for k in range(len(x)):
        xk = x[k]
        if xk > 0:
            last_pos = k
            if xk > hysteresis:
                armed = True
        elif armed and (xk < -hysteresis or (hysteresis == 0 and xk < 0)):
            j = last_pos + 1
            if x[j] == 0:
                out.append(float(t[j]))
            else:
                out.append(zero_crossing(CrossingPair(float(x[last_pos]), float(x[j]), float(t[last_pos]), float(t[j]))))
            armed = False
    return out


def find_crossings(t_us, x, hysteresis: float = 0.0, direction: str = "both") -> list[Crossing]:
    """Zero crossings of a centred series, in time order.

    A falling crossing is taken between the last positive sample and the
    sample after it, once the signal has gone above ``+hysteresis`` and then
    below ``-hysteresis``.  Rising crossings are the falling crossings of
    ``-x``.
    """
    t = np.asarray(t_us, dtype=float)
    x = np.asarray(x, dtype=float)
    out: list[Crossing] = []
    if direction in ("both", "down"):
        out += [Crossing(tc, False) for tc in _falling_pairs(t, x, hysteresis)]
    if direction in ("both", "up"):
        out += [Crossing(tc, True) for tc in _falling_pairs(t, -x, hysteresis)]
    out.sort()
    return out


# -- lag ------------------------------------------------------------------------


@dataclass(frozen=True)
class LagEstimate:
    td_us: float
    phi_deg: float


def wrap_degrees(phi: float) -> float:
    """Map an angle into (-180, 180]."""
    phi = math.fmod(phi, 360.0)
    if phi > 180.0:
        phi -= 360.0
    elif phi <= -180.0:
        phi += 360.0
    return phi


def lag(zc_current_us: float, zv_voltage_us: float, freq_hz: float = 60.0) -> LagEstimate:
    """Current-minus-voltage crossing delay and its phase angle.

    Positive angles mean the current lags the voltage.
    """
    td = zc_current_us - zv_voltage_us
    return LagEstimate(td, wrap_degrees(td * 1e-6 * 360.0 * freq_hz))


def pair_crossings(
    voltage: Sequence[Crossing], current: Sequence[Crossing], freq_hz: float = 60.0
) -> list[tuple[float, float]]:
    """Match every current crossing with the nearest same-direction voltage
    crossing no further than half a period away; returns ``(zc, zv)`` pairs."""
    half = 0.5e6 / freq_hz
    pairs = []
    for c in current:
        cands = [v.t_us for v in voltage if v.rising == c.rising and abs(v.t_us - c.t_us) <= half]
        if cands:
            pairs.append((c.t_us, min(cands, key=lambda tv: abs(tv - c.t_us))))
    if not pairs:
        raise PairingError("no voltage crossing within half a period of any current crossing")
    return pairs


# -- RMS and power -------------------------------------------------------------------


class Rms(NamedTuple):
    value: float
    cycles: int


def _span_integral(t, y, ta: float, tb: float) -> float:
    # Trapezoid over the piecewise-linear interpolant of y, clipped to [ta, tb].
    inner = (t > ta) & (t < tb)
    tt = np.concatenate([[ta], t[inner], [tb]])
    yy = np.concatenate([[np.interp(ta, t, y)], y[inner], [np.interp(tb, t, y)]])
    return float(np.sum(0.5 * (yy[1:] + yy[:-1]) * np.diff(tt)))


def span_mean(series: CenteredSeries, ta: float, tb: float) -> float:
    return _span_integral(series.t_us, series.value, ta, tb) / (tb - ta)


def _span(crossings) -> tuple[float, float, int]:
    times = sorted(c.t_us if isinstance(c, Crossing) else float(c) for c in crossings)
    if len(times) < 2:
        raise InsufficientDataError("need two same-direction crossings (one full cycle)")
    ta, tb = times[0], times[-1]
    if not tb > ta:
        raise InsufficientDataError("degenerate cycle span")
    return ta, tb, len(times) - 1


def true_rms(series: CenteredSeries, crossings) -> Rms:
    """Root mean square over the whole cycles delimited by ``crossings``.

    ``crossings`` are same-direction crossing times; the span runs from the
    first to the last, i.e. ``len(crossings) - 1`` cycles.
    """
    ta, tb, cycles = _span(crossings)
    sq = CenteredSeries(series.t_us, series.value**2, series.window)
    ms = span_mean(sq, ta, tb)
    return Rms(math.sqrt(max(ms, 0.0)), cycles)


def rms_from_peak(v_peak: float) -> float:
    if v_peak < 0:
        raise DomainError("peak must be >= 0")
    return v_peak / math.sqrt(2.0)


def resample(series: CenteredSeries, t_target) -> CenteredSeries:
    """Cubic-spline resampling of a series onto new timestamps."""
    if len(series) < 4:
        raise InsufficientDataError("need at least 4 points to resample")
    spline = CubicSpline(series.t_us, series.value, bc_type="not-a-knot", extrapolate=True)
    t_target = np.asarray(t_target, dtype=float)
    return CenteredSeries(t_target, spline(t_target), series.window)


def active_power(v: CenteredSeries, i: CenteredSeries, crossings, *, resample_current: bool = True) -> float:
    """Mean instantaneous power over the whole cycles in ``crossings``.

    With ``resample_current`` the current is first moved onto the voltage
    timestamps, cancelling the sequential-sampling skew.  Without it the two
    series must already be aligned sample for sample.
    """
    ta, tb, _ = _span(crossings)
    if resample_current:
        i = resample(i, v.t_us)
    elif len(i) != len(v):
        raise DomainError("misaligned series: current and voltage lengths differ")
    prod = CenteredSeries(v.t_us, v.value * i.value, v.window)
    return span_mean(prod, ta, tb)


def apparent_power(vrms: float, irms: float) -> float:
    if vrms < 0 or irms < 0:
        raise DomainError("RMS values must be >= 0")
    return vrms * irms


def reactive_power(s: float, p: float, rel_tol: float = 1e-9) -> float:
    """``sqrt(s**2 - p**2)``; ``s`` is clamped up to ``|p|`` within ``rel_tol``."""
    if s < abs(p):
        if abs(p) - s > rel_tol * max(abs(p), 1.0):
            raise InconsistencyError(f"apparent power {s} < |active power| {abs(p)}")
        s = abs(p)
    return math.sqrt(s * s - p * p)


# -- full measurement ----------------------------------------------------------------------


@dataclass(frozen=True)
class Measurement:
    vrms: float
    irms: float
    p_active: float
    s_apparent: float
    q_reactive: float
    phi_deg: Optional[float]
    t_us: int
    cycles_used: int
    v_peak: Optional[float] = None
    out_of_spec: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        """Single-line JSON with floats cut to ``WIRE_DIGITS`` significant
        digits, so a reading always fits one serial frame."""
        d = {
            k: float(format(v, f".{WIRE_DIGITS}g")) if isinstance(v, float) else v
            for k, v in self.to_dict().items()
        }
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "Measurement":
        names = {f.name for f in fields(cls)}
        if set(data) != names:
            raise DomainError(f"measurement fields mismatch: {sorted(set(data) ^ names)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "Measurement":
        return cls.from_dict(json.loads(text))


def _pick_cycles(crossings: list[Crossing]) -> list[Crossing]:
    falling = [c for c in crossings if not c.rising]
    rising = [c for c in crossings if c.rising]
    return falling if len(falling) >= len(rising) else rising


def measure(
    v_stream: ChannelStream,
    i_stream: ChannelStream,
    chain: SensorChain,
    freq_hz: float = 60.0,
    *,
    adc: AdcModel = AdcModel(),
    start_us: Optional[float] = None,
    compensate_skew: bool = True,
    offset_window: int = DEFAULT_OFFSET_WINDOW,
    hysteresis: float = DEFAULT_HYSTERESIS,
) -> Measurement:
    """Turn a block of raw samples into one ``Measurement``.

    Samples before ``start_us`` are history: they warm up the moving-average
    offset filter and arm the crossing detector but are not measured.  RMS
    and power use the whole cycles between voltage crossings in the window,
    with the DC removed as the mean over those same cycles.  ``v_peak`` is the
    largest value of the voltage after the moving-average filter, the quantity
    the peak-based RMS method starts from.

    ``compensate_skew=False`` treats each current sample as if it had been
    taken at the instant of its voltage sample.
    """
    if len(v_stream) == 0 or len(i_stream) == 0:
        raise InsufficientDataError("empty stream")
    t_v = v_stream.t_us.astype(float)
    if compensate_skew:
        t_i = i_stream.t_us.astype(float)
    else:
        if len(i_stream) != len(v_stream):
            raise DomainError("misaligned series: current and voltage lengths differ")
        t_i = t_v
    v_raw = code_to_line_voltage(v_stream.code, chain, adc)
    i_raw = code_to_current(i_stream.code, chain.acs_sensitivity_mv_per_a, adc)
    start = t_v[0] if start_us is None else float(start_us)
    win_v = t_v >= start
    win_i = t_i >= start
    if win_v.sum() < 4:
        raise InsufficientDataError("measurement window holds fewer than 4 samples")
    t_lo, t_hi = t_v[win_v][0], t_v[win_v][-1]

    def cycle_crossings(x, t, win):
        h = hysteresis * float(np.max(np.abs(x[win]))) if win.any() else 0.0
        return find_crossings(t, x, h)

    # Coarse DC from the window mean, then refined over the detected cycles.
    dc_v = float(v_raw[win_v].mean())
    v_cross = cycle_crossings(v_raw - dc_v, t_v, win_v)
    for _ in range(2):
        cyc = _pick_cycles([c for c in v_cross if t_lo <= c.t_us <= t_hi])
        if len(cyc) < 2:
            raise InsufficientDataError("window does not contain a full voltage cycle")
        ta, tb = cyc[0].t_us, cyc[-1].t_us
        dc_v = span_mean(CenteredSeries(t_v, v_raw), ta, tb)
        v_cross = cycle_crossings(v_raw - dc_v, t_v, win_v)
    cyc = _pick_cycles([c for c in v_cross if t_lo <= c.t_us <= t_hi])
    if len(cyc) < 2:
        raise InsufficientDataError("window does not contain a full voltage cycle")
    ta, tb = cyc[0].t_us, cyc[-1].t_us

    v_c = CenteredSeries(t_v, v_raw - dc_v, offset_window)
    vrms, cycles = true_rms(v_c, cyc)

    i_codes = i_stream.code[win_i]
    if i_codes.size == 0 or np.ptp(i_codes) == 0:
        irms = p = 0.0
        phi = None
    else:
        i_series = CenteredSeries(t_i, i_raw, offset_window)
        i_on_v = resample(i_series, t_v) if compensate_skew else CenteredSeries(t_v, i_raw)
        dc_i = span_mean(i_on_v, ta, tb)
        i_on_v = CenteredSeries(t_v, i_on_v.value - dc_i, offset_window)
        irms = true_rms(i_on_v, cyc).value
        p = active_power(v_c, i_on_v, cyc, resample_current=False)
        phi = None
        lsb_a = adc.lsb_mv / chain.acs_sensitivity_mv_per_a
        if irms > 0.5 * lsb_a:
            i_cross = cycle_crossings(i_raw - dc_i, t_i, win_i)
            i_cross = [c for c in i_cross if t_lo <= c.t_us <= t_hi + (t_i[-1] - t_v[-1])]
            try:
                pairs = pair_crossings(v_cross, i_cross, freq_hz)
                phi = float(np.mean([lag(zc, zv, freq_hz).phi_deg for zc, zv in pairs]))
            except PairingError:
                phi = None

    s = apparent_power(vrms, irms)
    q = reactive_power(s, p, rel_tol=1e-9)

    v_peak = None
    if len(v_raw) >= offset_window:
        filtered = remove_offset(t_v, v_raw, offset_window)
        settled = win_v & ~filtered.warmup
        if settled.any():
            v_peak = float(np.max(filtered.value[settled]))

    return Measurement(
        vrms=float(vrms),
        irms=float(irms),
        p_active=float(p),
        s_apparent=float(s),
        q_reactive=float(q),
        phi_deg=phi,
        t_us=int(t_hi),
        cycles_used=int(cycles),
        v_peak=v_peak,
    )
