"""ECG signal tools: R-peak detection, wave delineation, HRV features.

Deterministic numpy/scipy processing, no LLM involvement anywhere in this
module. The narrative in an EcgReport is template-generated text.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, filtfilt, find_peaks

from .errors import ValidationError
from .model import Waveform

MIN_DURATION_S = 2.0
REFRACTORY_S = 0.2
# Energy peaks must clear this fraction of the strongest beat's energy, which
# keeps detection invariant under amplitude scaling.
THRESHOLD_FRACTION = 0.3
SMOOTH_WINDOW_S = 0.15
REFINE_RADIUS_S = 0.1

# Delineation search windows relative to the R peak, in ms.
P_WINDOW_MS = (-300, -80)
T_WINDOW_MS = (80, 400)
QRS_RADIUS_MS = 100
WAVE_PRESENCE_FRACTION = 0.05

CV_IRREGULAR_THRESHOLD = 0.15


def load_waveform_json(path) -> Waveform:
    with open(path, "r", encoding="utf-8") as fh:
        return Waveform.from_json_dict(json.load(fh))


def load_waveform_csv(path) -> Waveform:
    """CSV layout: header line `sampling_rate=<hz>,lead=<name>`, then one sample per line."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().strip()
        meta = {}
        for part in header.split(","):
            if "=" in part:
                key, _, value = part.partition("=")
                meta[key.strip()] = value.strip()
        if "sampling_rate" not in meta:
            raise ValidationError("waveform csv header must declare sampling_rate=<hz>")
        samples = []
        for row in csv.reader(fh):
            if row and row[0].strip():
                samples.append(float(row[0]))
    return Waveform(
        samples=tuple(samples),
        sampling_rate=float(meta["sampling_rate"]),
        lead=meta.get("lead", "II"),
    )


def _bandpass(x: np.ndarray, rate: float) -> np.ndarray:
    low = 5.0
    high = min(15.0, 0.45 * rate)
    if high <= low:
        raise ValidationError(f"sampling rate {rate} Hz too low for QRS band-pass")
    b, a = butter(2, [low / (rate / 2.0), high / (rate / 2.0)], btype="band")
    return filtfilt(b, a, x)


def detect_r_peaks(samples, sampling_rate: float) -> list:
    """Locate R peaks as strictly increasing sample indices.

    Band-pass, squared-derivative energy, adaptive threshold at a fixed
    fraction of the maximum, 200 ms refractory. The threshold is relative,
    so scaling the amplitude never changes the output, and delaying the
    signal shifts every index by the same amount. A flat signal yields an
    empty list; a record shorter than two seconds is a precondition error.
    """
    if sampling_rate <= 0:
        raise ValidationError("sampling_rate must be positive")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("samples must be one-dimensional")
    if len(x) / sampling_rate < MIN_DURATION_S:
        raise ValidationError(f"record shorter than {MIN_DURATION_S} s")
    if np.ptp(x) == 0.0:
        return []

    filtered = _bandpass(x, sampling_rate)
    energy = np.square(np.diff(filtered, prepend=filtered[0]))
    smooth_n = max(1, int(round(SMOOTH_WINDOW_S * sampling_rate)))
    energy = np.convolve(energy, np.ones(smooth_n) / smooth_n, mode="same")

    peak_energy = float(energy.max())
    if peak_energy <= 0.0:
        return []
    distance = max(1, int(round(REFRACTORY_S * sampling_rate)))
    raw_peaks, _ = find_peaks(energy, height=THRESHOLD_FRACTION * peak_energy, distance=distance)

    radius = max(1, int(round(REFINE_RADIUS_S * sampling_rate)))
    abs_filtered = np.abs(filtered)
    refined = []
    for p in raw_peaks:
        lo = max(0, p - radius)
        hi = min(len(x), p + radius + 1)
        refined.append(lo + int(np.argmax(abs_filtered[lo:hi])))

    peaks = []
    for idx in sorted(set(refined)):
        if peaks and idx - peaks[-1] < distance:
            continue
        peaks.append(idx)
    return peaks


def _ms_to_samples(ms: float, rate: float) -> int:
    return int(round(ms / 1000.0 * rate))


def _nearest_extremum(x: np.ndarray, start: int, stop: int, step: int):
    """Walk from start toward stop; return the first turning point index."""
    prev = x[start]
    i = start + step
    while (step > 0 and i < stop - 1) or (step < 0 and i > stop):
        d_in = x[i] - prev
        d_out = x[i + step] - x[i]
        if d_in * d_out < 0:
            return i
        prev = x[i]
        i += step
    return None


def _find_wave(x: np.ndarray, lo: int, hi: int, r_amplitude: float):
    """Largest deflection inside [lo, hi); None when below the presence bar."""
    if hi <= lo:
        return None
    segment = np.abs(x[lo:hi])
    peak = lo + int(np.argmax(segment))
    if abs(x[peak]) < WAVE_PRESENCE_FRACTION * r_amplitude:
        return None
    level = 0.2 * abs(x[peak])
    onset = peak
    while onset > lo and abs(x[onset - 1]) >= level:
        onset -= 1
    offset = peak
    while offset < hi - 1 and abs(x[offset + 1]) >= level:
        offset += 1
    return {"onset": int(onset), "peak": int(peak), "offset": int(offset)}


def delineate(samples, sampling_rate: float, r_peaks) -> list:
    """Per-beat P/QRS/T landmarks around each given R peak.

    P is sought 300..80 ms before R, T 80..400 ms after, QRS bounds are the
    nearest signal extrema bracketing R. Search windows are clamped to the
    midpoints between neighboring beats so waves never overlap across beats.
    Absent waves are reported as None.
    """
    x = np.asarray(samples, dtype=np.float64)
    beats = []
    qrs_radius = _ms_to_samples(QRS_RADIUS_MS, sampling_rate)
    for i, r in enumerate(r_peaks):
        left_bound = 0 if i == 0 else (r_peaks[i - 1] + r) // 2 + 1
        right_bound = len(x) if i == len(r_peaks) - 1 else (r + r_peaks[i + 1]) // 2
        r_amp = abs(x[r]) if abs(x[r]) > 0 else 1.0

        onset = _nearest_extremum(x, r, max(left_bound, r - qrs_radius), -1)
        offset = _nearest_extremum(x, r, min(right_bound, r + qrs_radius), 1)
        qrs = {
            "onset": int(onset) if onset is not None else max(left_bound, r - qrs_radius),
            "peak": int(r),
            "offset": int(offset) if offset is not None else min(right_bound - 1, r + qrs_radius),
        }

        p_lo = max(left_bound, r + _ms_to_samples(P_WINDOW_MS[0], sampling_rate))
        p_hi = max(left_bound, r + _ms_to_samples(P_WINDOW_MS[1], sampling_rate))
        t_lo = min(right_bound, r + _ms_to_samples(T_WINDOW_MS[0], sampling_rate))
        t_hi = min(right_bound, r + _ms_to_samples(T_WINDOW_MS[1], sampling_rate))
        beats.append(
            {
                "r": int(r),
                "p": _find_wave(x, p_lo, min(p_hi, qrs["onset"]), r_amp),
                "qrs": qrs,
                "t": _find_wave(x, max(t_lo, qrs["offset"] + 1), t_hi, r_amp),
            }
        )
    return beats


def rr_features(rr_ms) -> dict:
    """Heart-rate variability features over RR intervals in milliseconds.

    mean_hr_bpm = 60000 / mean(rr); sdnn is the population standard
    deviation; rmssd is the root mean square of successive differences. A
    single interval has no successive differences, so rmssd is reported as
    0.0 with rmssd_defined False. The rhythm is flagged irregular when the
    coefficient of variation exceeds 0.15 (heuristic constant, documented
    rather than derived).
    """
    rr = np.asarray(list(rr_ms), dtype=np.float64)
    if rr.size == 0:
        raise ValidationError("rr_features requires at least one interval")
    if np.any(rr <= 0):
        raise ValidationError("rr intervals must be positive")
    mean = float(rr.mean())
    sdnn = float(rr.std(ddof=0))
    if rr.size > 1:
        diffs = np.diff(rr)
        rmssd = float(np.sqrt(np.mean(np.square(diffs))))
        rmssd_defined = True
    else:
        rmssd = 0.0
        rmssd_defined = False
    return {
        "mean_hr_bpm": 60000.0 / mean,
        "sdnn_ms": sdnn,
        "rmssd_ms": rmssd,
        "rmssd_defined": rmssd_defined,
        "irregular": bool(sdnn / mean > CV_IRREGULAR_THRESHOLD),
    }


@dataclass
class EcgReport:
    lead: str
    beat_count: int
    r_peaks: list
    features: dict | None
    beats: list = field(default_factory=list)
    narrative: str = ""

    def to_json_dict(self):
        return {
            "lead": self.lead,
            "beat_count": self.beat_count,
            "r_peaks": list(self.r_peaks),
            "features": self.features,
            "beats": self.beats,
            "narrative": self.narrative,
        }


def ecg_report(waveform: Waveform) -> EcgReport:
    """Full deterministic analysis of one lead: peaks, waves, HRV, narrative."""
    peaks = detect_r_peaks(waveform.samples, waveform.sampling_rate)
    if len(peaks) < 2:
        narrative = (
            f"Lead {waveform.lead}: no beats detected; the tracing is flat or "
            "below the detection threshold."
            if not peaks
            else f"Lead {waveform.lead}: a single beat detected; rate and rhythm cannot be assessed."
        )
        return EcgReport(waveform.lead, len(peaks), peaks, None, [], narrative)
    rr = [(b - a) * 1000.0 / waveform.sampling_rate for a, b in zip(peaks, peaks[1:])]
    features = rr_features(rr)
    beats = delineate(waveform.samples, waveform.sampling_rate, peaks)
    rhythm = "irregular" if features["irregular"] else "regular"
    p_present = sum(1 for b in beats if b["p"] is not None)
    narrative = (
        f"Lead {waveform.lead}: {len(peaks)} beats, mean heart rate "
        f"{features['mean_hr_bpm']:.0f} bpm, rhythm {rhythm} "
        f"(SDNN {features['sdnn_ms']:.0f} ms, RMSSD {features['rmssd_ms']:.0f} ms). "
        f"P waves identified in {p_present} of {len(beats)} beats."
    )
    return EcgReport(waveform.lead, len(peaks), peaks, features, beats, narrative)
