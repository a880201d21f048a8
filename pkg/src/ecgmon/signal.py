"""ECG trace container and Butterworth lowpass filtering.

Filters are designed as cascades of second-order sections from the analog
Butterworth prototype through a prewarped bilinear transform, so the
digital response hits exactly 1/sqrt(2) at the requested cutoff.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal as _sps

from .errors import InvalidInput, InvalidParameter

DEFAULT_ORDER = 4
DEFAULT_CUTOFF_HZ = 40.0
DEFAULT_SAMPLE_RATE_HZ = 360


class ClassLabel(enum.IntEnum):
    NORMAL = 0
    ABNORMAL = 1

    @classmethod
    def parse(cls, value) -> "ClassLabel":
        if isinstance(value, ClassLabel):
            return value
        if isinstance(value, str):
            text = value.strip().lower()
            if text in ("normal", "0"):
                return cls.NORMAL
            if text in ("abnormal", "1"):
                return cls.ABNORMAL
            raise InvalidInput(f"unknown class label {value!r}")
        return cls(int(value))


def _as_finite_array(samples, what: str = "samples") -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInput(f"{what} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{what} contain non-finite values")
    return arr


@dataclass(eq=False)
class EcgRecord:
    """A single-lead ECG trace in millivolts."""

    record_id: str
    patient_ref: str
    sample_rate_hz: int
    samples: np.ndarray
    label: ClassLabel | None = None

    def __post_init__(self):
        if int(self.sample_rate_hz) != self.sample_rate_hz or self.sample_rate_hz <= 0:
            raise InvalidInput(f"sample_rate_hz must be a positive integer, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)
        arr = _as_finite_array(self.samples).copy()
        if arr.size == 0:
            raise InvalidInput("record has no samples")
        arr.flags.writeable = False
        self.samples = arr
        if self.label is not None:
            self.label = ClassLabel.parse(self.label)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def with_samples(self, samples) -> "EcgRecord":
        return EcgRecord(self.record_id, self.patient_ref, self.sample_rate_hz, samples, self.label)

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.patient_ref == other.patient_ref
            and self.sample_rate_hz == other.sample_rate_hz
            and self.label == other.label
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(frozen=True)
class Biquad:
    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    @property
    def is_stable(self) -> bool:
        return abs(self.a2) < 1.0 and abs(self.a1) < 1.0 + self.a2


@dataclass(frozen=True)
class BiquadCascade:
    sections: tuple[Biquad, ...]
    sample_rate_hz: float
    cutoff_hz: float
    order: int
    _sos: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sos = np.array([[s.b0, s.b1, s.b2, 1.0, s.a1, s.a2] for s in self.sections], dtype=np.float64)
        sos.flags.writeable = False
        object.__setattr__(self, "_sos", sos)

    @property
    def sos(self) -> np.ndarray:
        """Coefficients as an (n, 6) array in ``[b0, b1, b2, 1, a1, a2]`` rows."""
        return self._sos

    def frequency_response(self, freqs_hz) -> np.ndarray:
        """Complex response evaluated on the unit circle."""
        w = 2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / self.sample_rate_hz
        z1 = np.exp(-1j * w)
        z2 = z1 * z1
        h = np.ones_like(z1)
        for s in self.sections:
            h = h * (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2)
        return h

    def dc_gain(self) -> float:
        g = 1.0
        for s in self.sections:
            g *= (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2)
        return g


def design_butterworth_lowpass(
    order: int = DEFAULT_ORDER,
    cutoff_hz: float = DEFAULT_CUTOFF_HZ,
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
) -> BiquadCascade:
    """Design an even-order Butterworth lowpass as second-order sections.

    Parameters
    ----------
    order : int
        Filter order; even, between 2 and 16.
    cutoff_hz : float
        -3 dB frequency. Must lie strictly inside (0, Nyquist).
    sample_rate_hz : float
        Sampling frequency of the data the filter will see.
    """
    if isinstance(order, bool) or int(order) != order or order < 2 or order > 16 or order % 2:
        raise InvalidParameter(f"order must be an even integer in [2, 16], got {order}")
    if not (sample_rate_hz > 0 and math.isfinite(sample_rate_hz)):
        raise InvalidParameter(f"sample rate must be positive, got {sample_rate_hz}")
    nyquist = sample_rate_hz / 2.0
    if not (0.0 < cutoff_hz < nyquist):
        raise InvalidParameter(f"cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz")

    order = int(order)
    # tan() prewarp; the 2*fs factors of the bilinear map cancel out.
    k = math.tan(math.pi * cutoff_hz / sample_rate_hz)
    k2 = k * k
    sections = []
    for i in range(order // 2):
        # 2*zeta for the i-th conjugate pole pair of the analog prototype
        damping = 2.0 * math.sin(math.pi * (2 * i + 1) / (2 * order))
        norm = 1.0 / (1.0 + damping * k + k2)
        b0 = k2 * norm
        sections.append(
            Biquad(
                b0=b0,
                b1=2.0 * b0,
                b2=b0,
                a1=2.0 * (k2 - 1.0) * norm,
                a2=(1.0 - damping * k + k2) * norm,
            )
        )
    return BiquadCascade(tuple(sections), float(sample_rate_hz), float(cutoff_hz), order)


def apply_filter(filt: BiquadCascade, samples: Sequence[float]) -> np.ndarray:
    """Causal direct-form-II-transposed filtering from zero initial state."""
    x = _as_finite_array(samples)
    if x.size == 0:
        return x.copy()
    return _sps.sosfilt(np.array(filt.sos), x)


def apply_zero_phase(filt: BiquadCascade, samples: Sequence[float]) -> np.ndarray:
    """Forward-backward filtering: no phase shift, squared magnitude response.

    No edge padding is applied, so the first and last few time constants
    carry the filter's start-up transient.
    """
    x = _as_finite_array(samples)
    if x.size == 0:
        return x.copy()
    y = _sps.sosfilt(np.array(filt.sos), x)[::-1]
    y = _sps.sosfilt(np.array(filt.sos), y)[::-1]
    return np.ascontiguousarray(y)
