"""Beat detection and per-record feature extraction.

R peaks come from a Pan-Tompkins style pipeline: 5-15 Hz bandpass,
derivative, squaring, a 150 ms moving-window integral and adaptive
signal/noise thresholds. All thresholds are relative to running peak
estimates, so detections do not change when the trace is rescaled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as _sps

from .errors import DegenerateInput, EcgMonError, InsufficientBeats, InsufficientData, InvalidInput
from .signal import BiquadCascade, EcgRecord, apply_zero_phase

FEATURE_NAMES = (
    "hr_variability_ms",
    "qrs_duration_mean_ms",
    "qrs_duration_std_ms",
    "spectral_sum",
    "spectral_max",
    "spectral_max_freq_hz",
    "spectral_mean",
    "spectral_std",
    "skewness",
    "kurtosis_excess",
)

REFRACTORY_S = 0.200
MWI_WINDOW_S = 0.150
LEARNING_S = 2.0
QRS_WINDOW_S = 0.100
QRS_SLOPE_FRACTION = 0.05


@dataclass(frozen=True)
class RPeakList:
    indices: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).copy()
        if idx.ndim != 1:
            raise InvalidInput("peak indices must be one-dimensional")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise InvalidInput("peak indices must be strictly increasing")
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return int(self.indices.size)

    @property
    def times_s(self) -> np.ndarray:
        return self.indices / self.sample_rate_hz


@dataclass(frozen=True)
class FeatureVector:
    hr_variability_ms: float
    qrs_duration_mean_ms: float
    qrs_duration_std_ms: float
    spectral_sum: float
    spectral_max: float
    spectral_max_freq_hz: float
    spectral_mean: float
    spectral_std: float
    skewness: float
    kurtosis_excess: float
    extras: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        """Flat mapping: the ten named features first, then extras sorted by name."""
        row = {name: float(getattr(self, name)) for name in FEATURE_NAMES}
        for k in sorted(self.extras):
            row[k] = float(self.extras[k])
        return row

    @classmethod
    def from_row(cls, row: dict) -> "FeatureVector":
        extras = {k: float(v) for k, v in row.items() if k not in FEATURE_NAMES}
        return cls(**{n: float(row[n]) for n in FEATURE_NAMES}, extras=extras)

    def to_json(self) -> str:
        return json.dumps(self.to_row())

    @classmethod
    def column_names(cls, extras=()) -> list[str]:
        return list(FEATURE_NAMES) + sorted(extras)


def _bandpass_sos(fs: int) -> np.ndarray:
    if fs <= 32:
        raise InvalidInput(f"sample rate {fs} Hz too low for a 5-15 Hz QRS bandpass")
    return _sps.butter(2, [5.0, 15.0], btype="bandpass", fs=fs, output="sos")


def _integrated_energy(x: np.ndarray, fs: int) -> tuple[np.ndarray, np.ndarray]:
    bp = _sps.sosfiltfilt(_bandpass_sos(fs), x)
    # five-point derivative, centred so the energy envelope stays aligned with the QRS
    deriv = np.convolve(bp, np.array([1.0, 2.0, 0.0, -2.0, -1.0]) * (fs / 8.0), mode="same")
    width = max(1, int(round(MWI_WINDOW_S * fs)))
    mwi = np.convolve(deriv * deriv, np.ones(width) / width, mode="same")
    return mwi, deriv


def detect_r_peaks(record: EcgRecord) -> RPeakList:
    """Locate R peaks with adaptive dual thresholds and search-back."""
    fs = record.sample_rate_hz
    x = record.samples
    if x.size < LEARNING_S * fs:
        raise InsufficientData(f"need at least {LEARNING_S:g} s of samples, got {x.size / fs:.3f} s")

    mwi, deriv = _integrated_energy(x, fs)
    refractory = int(round(REFRACTORY_S * fs))
    if not np.any(mwi > 0):
        return RPeakList(np.empty(0, dtype=np.int64), fs)

    cand, _ = _sps.find_peaks(mwi, distance=refractory)
    if cand.size == 0:
        return RPeakList(np.empty(0, dtype=np.int64), fs)

    learn = mwi[: int(LEARNING_S * fs)]
    spki = 0.25 * float(learn.max())
    npki = 0.5 * float(learn.mean())
    thr1 = npki + 0.25 * (spki - npki)

    half = max(1, int(round(0.075 * fs)))

    def slope_at(i: int) -> float:
        return float(np.max(np.abs(deriv[max(0, i - half): i + half + 1])))

    accepted: list[int] = []
    noise: list[int] = []
    rr_recent: list[int] = []
    last_slope = 0.0

    def accept(i: int, weight: float):
        nonlocal spki, last_slope
        spki = weight * mwi[i] + (1.0 - weight) * spki
        if accepted:
            rr_recent.append(i - accepted[-1])
            del rr_recent[:-8]
        accepted.append(i)
        last_slope = slope_at(i)

    for i in cand:
        v = float(mwi[i])
        if accepted and rr_recent and len(rr_recent) >= 2:
            rr_avg = sum(rr_recent) / len(rr_recent)
            if i - accepted[-1] > 1.66 * rr_avg:
                # search-back over noise peaks for a missed beat
                lo = accepted[-1] + refractory
                hi = i - refractory
                pool = [j for j in noise if lo <= j <= hi and mwi[j] > 0.5 * thr1]
                if pool:
                    best = max(pool, key=lambda j: mwi[j])
                    accept(best, 0.25)
                    noise = [j for j in noise if j > best]
                    thr1 = npki + 0.25 * (spki - npki)
        if v > thr1:
            gap = i - accepted[-1] if accepted else None
            if gap is not None and gap < refractory:
                continue
            if gap is not None and gap < int(0.36 * fs) and slope_at(i) < 0.5 * last_slope:
                # T wave: keep it as noise
                npki = 0.125 * v + 0.875 * npki
                noise.append(int(i))
            else:
                accept(int(i), 0.125)
        else:
            npki = 0.125 * v + 0.875 * npki
            noise.append(int(i))
        thr1 = npki + 0.25 * (spki - npki)

    peaks = []
    for i in accepted:
        lo = max(0, i - half)
        hi = min(x.size, i + half + 1)
        peaks.append(lo + int(np.argmax(x[lo:hi])))
    peaks = sorted(set(peaks))
    kept: list[int] = []
    for p in peaks:
        if kept and p - kept[-1] < refractory:
            if x[p] > x[kept[-1]]:
                kept[-1] = p
            continue
        kept.append(p)
    return RPeakList(np.asarray(kept, dtype=np.int64), fs)


def rr_features(peaks: RPeakList) -> dict:
    """SDNN and mean RR, both in milliseconds."""
    if len(peaks) < 3:
        raise InsufficientBeats(f"need at least 3 beats for RR statistics, got {len(peaks)}")
    rr = np.diff(peaks.indices) * (1000.0 / peaks.sample_rate_hz)
    return {"sdnn_ms": float(np.std(rr)), "mean_rr_ms": float(np.mean(rr))}


def _beat_duration(d: np.ndarray, r: int, w: int) -> int:
    """QRS width in samples for the beat at ``r`` given first differences ``d``."""
    lo = max(0, r - w)
    hi = min(d.size, r + w)  # d[k] is the slope between samples k and k+1
    if hi <= lo:
        return 0
    window = np.abs(d[lo:hi])
    peak = float(window.max())
    if peak == 0.0:
        return 0
    thr = QRS_SLOPE_FRACTION * peak
    onset = offset = r
    if r > lo:
        j = lo + int(np.argmax(np.abs(d[lo:r])))
        while j - 1 >= lo and abs(d[j - 1]) >= thr:
            j -= 1
        onset = j
    if hi > r:
        k = r + int(np.argmax(np.abs(d[r:hi])))
        while k + 1 < hi and abs(d[k + 1]) >= thr:
            k += 1
        offset = k + 1
    return offset - onset


def qrs_durations(record: EcgRecord, peaks: RPeakList) -> dict:
    """Mean and standard deviation of QRS width in milliseconds.

    Onset and offset are found by walking outward from the steepest slope
    on each side of the R peak until the slope drops below 5% of the
    beat's maximum slope, staying within 100 ms of the peak.
    """
    if len(peaks) == 0:
        raise InsufficientBeats("no beats to delineate")
    fs = record.sample_rate_hz
    d = np.diff(record.samples)
    w = max(1, int(round(QRS_WINDOW_S * fs)))
    widths = np.array([_beat_duration(d, int(r), w) for r in peaks.indices], dtype=np.float64)
    widths *= 1000.0 / fs
    return {"mean_ms": float(np.mean(widths)), "std_ms": float(np.std(widths))}


def periodogram(samples: np.ndarray, fs: float) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    power = np.abs(np.fft.rfft(x)) ** 2 / (n * fs)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    return freqs, power


def spectral_stats(record: EcgRecord) -> dict:
    if record.samples.size < 64:
        raise InsufficientData(f"need at least 64 samples for spectral statistics, got {record.samples.size}")
    freqs, p = periodogram(record.samples, record.sample_rate_hz)
    k = int(np.argmax(p))  # first occurrence on ties
    return {
        "sum": float(np.sum(p)),
        "max": float(p[k]),
        "max_freq_hz": float(freqs[k]) if p[k] > 0 else 0.0,
        "mean": float(np.mean(p)),
        "std": float(np.std(p)),
    }


def moment_stats(samples) -> dict:
    """Sample skewness and excess kurtosis from central moments over N."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise InsufficientData("no samples")
    c = x - x.mean()
    m2 = float(np.mean(c**2))
    if m2 == 0.0 or np.ptp(x) == 0.0:
        raise DegenerateInput("zero variance")
    m3 = float(np.mean(c**3))
    m4 = float(np.mean(c**4))
    return {"skewness": m3 / m2**1.5, "kurtosis_excess": m4 / (m2 * m2) - 3.0}


def _tagged(stage: str, fn, *args):
    try:
        return fn(*args)
    except EcgMonError as exc:
        raise exc.with_stage(stage)


def extract_features(record: EcgRecord, filt: BiquadCascade) -> FeatureVector:
    """Filter the trace (zero phase) and compute every feature."""
    filtered = record.with_samples(_tagged("filter", apply_zero_phase, filt, record.samples))
    peaks = _tagged("r_peaks", detect_r_peaks, filtered)
    rr = _tagged("hr_variability_ms", rr_features, peaks)
    qrs = _tagged("qrs_duration_mean_ms", qrs_durations, filtered, peaks)
    spec = _tagged("spectral_sum", spectral_stats, filtered)
    mom = _tagged("skewness", moment_stats, filtered.samples)

    rr_ms = np.diff(peaks.indices) * (1000.0 / peaks.sample_rate_hz)
    extras = {
        "mean_rr_ms": rr["mean_rr_ms"],
        "rmssd_ms": float(np.sqrt(np.mean(np.diff(rr_ms) ** 2))),
        "heart_rate_bpm": 60000.0 / rr["mean_rr_ms"],
    }
    fv = FeatureVector(
        hr_variability_ms=rr["sdnn_ms"],
        qrs_duration_mean_ms=qrs["mean_ms"],
        qrs_duration_std_ms=qrs["std_ms"],
        spectral_sum=spec["sum"],
        spectral_max=spec["max"],
        spectral_max_freq_hz=spec["max_freq_hz"],
        spectral_mean=spec["mean"],
        spectral_std=spec["std"],
        skewness=mom["skewness"],
        kurtosis_excess=mom["kurtosis_excess"],
        extras=extras,
    )
    if not all(math.isfinite(v) for v in fv.to_row().values()):
        raise DegenerateInput("non-finite feature value").with_stage("features")
    return fv
