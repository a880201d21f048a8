"""Synthetic ECG and labelled corpus generation.

Beats are sums of Gaussian waves (P, Q, R, S, T) placed at known R times,
so detectors and feature extractors can be scored against ground truth.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal import ClassLabel, EcgRecord


@dataclass(frozen=True)
class Wave:
    amplitude_mv: float
    offset_s: float
    width_s: float


NORMAL_BEAT = (
    Wave(0.15, -0.20, 0.025),  # P
    Wave(-0.10, -0.030, 0.008),  # Q
    Wave(1.00, 0.0, 0.010),  # R
    Wave(-0.25, 0.030, 0.008),  # S
    Wave(0.30, 0.28, 0.050),  # T
)

# Wide QRS, absent P wave, flattened T: a bundle-branch-block-like shape.
ABNORMAL_BEAT = (
    Wave(-0.12, -0.045, 0.014),
    Wave(0.90, 0.0, 0.018),
    Wave(-0.35, 0.055, 0.016),
    Wave(0.12, 0.30, 0.060),
)


def rr_sequence(
    duration_s: float,
    rng: np.random.Generator,
    mean_bpm: float = 70.0,
    jitter: float = 0.0,
    bpm_range: tuple[float, float] | None = None,
    drift_period_s: float = 300.0,
) -> np.ndarray:
    """Beat-to-beat intervals in seconds covering ``duration_s``.

    With ``bpm_range`` the instantaneous rate sweeps sinusoidally between
    the two bounds; ``jitter`` is the relative standard deviation of
    per-beat noise on top of the underlying rate.
    """
    out = []
    t = 0.0
    phase = rng.uniform(0, 2 * np.pi)
    while t < duration_s + 2.0:
        if bpm_range is None:
            bpm = mean_bpm
        else:
            lo, hi = bpm_range
            bpm = lo + (hi - lo) * 0.5 * (1.0 + np.sin(2 * np.pi * t / drift_period_s + phase))
        rr = 60.0 / bpm
        if jitter:
            rr *= 1.0 + jitter * rng.standard_normal()
        rr = max(rr, 0.3)
        out.append(rr)
        t += rr
    return np.asarray(out)


def render_beats(
    r_times_s: np.ndarray,
    n_samples: int,
    sample_rate_hz: int,
    beat: tuple[Wave, ...] = NORMAL_BEAT,
    amplitude_scale: float = 1.0,
    width_jitter: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Sum of beat templates; ``width_jitter`` rescales each beat's widths by ``1 + jitter * N(0, 1)``."""
    if width_jitter and rng is None:
        raise ValueError("width_jitter needs an rng")
    x = np.zeros(n_samples)
    t_axis = np.arange(n_samples) / sample_rate_hz
    span = 0.6
    for rt in r_times_s:
        lo = max(0, int((rt - span) * sample_rate_hz))
        hi = min(n_samples, int((rt + span) * sample_rate_hz) + 1)
        if lo >= hi:
            continue
        t = t_axis[lo:hi]
        k = max(0.5, 1.0 + width_jitter * rng.standard_normal()) if width_jitter else 1.0
        for w in beat:
            x[lo:hi] += amplitude_scale * w.amplitude_mv * np.exp(-0.5 * ((t - rt - k * w.offset_s) / (k * w.width_s)) ** 2)
    return x


def add_noise(x: np.ndarray, rng: np.random.Generator, snr_db: float | None) -> np.ndarray:
    if snr_db is None:
        return x
    power = float(np.mean(x**2))
    sigma = np.sqrt(power / 10 ** (snr_db / 10.0))
    return x + sigma * rng.standard_normal(x.size)


def synthesize_ecg(
    duration_s: float,
    sample_rate_hz: int = 360,
    *,
    rng: np.random.Generator | None = None,
    mean_bpm: float = 70.0,
    jitter: float = 0.0,
    bpm_range: tuple[float, float] | None = None,
    beat: tuple[Wave, ...] = NORMAL_BEAT,
    snr_db: float | None = None,
    first_beat_s: float = 0.5,
    width_jitter: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(samples_mv, r_times_s)`` for a synthetic single-lead trace."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rr = rr_sequence(duration_s, rng, mean_bpm=mean_bpm, jitter=jitter, bpm_range=bpm_range)
    r_times = first_beat_s + np.concatenate([[0.0], np.cumsum(rr)])
    r_times = r_times[r_times < duration_s - 0.3]
    n = int(round(duration_s * sample_rate_hz))
    x = render_beats(r_times, n, sample_rate_hz, beat, width_jitter=width_jitter, rng=rng)
    return add_noise(x, rng, snr_db), r_times


def scale_beat(beat: tuple[Wave, ...], width: float = 1.0, amplitude: float = 1.0) -> tuple[Wave, ...]:
    """Stretch a template in time around the R peak and scale its amplitude."""
    return tuple(Wave(w.amplitude_mv * amplitude, w.offset_s * width, w.width_s * width) for w in beat)


def synthetic_record(
    record_id: str,
    label: ClassLabel,
    rng: np.random.Generator,
    duration_s: float = 20.0,
    sample_rate_hz: int = 360,
    patient_ref: str = "",
) -> EcgRecord:
    """One labelled trace with class-dependent rhythm and morphology.

    Classes overlap on purpose: abnormal QRS width is drawn from a range
    whose low end is close to normal, so some abnormal traces differ mainly
    by rhythm irregularity. Per-record factors are uniform, not mixtures or
    heavy-tailed, which keeps each class unimodal.
    """
    if label == ClassLabel.NORMAL:
        bpm = rng.uniform(55, 95)
        jitter = rng.uniform(0.01, 0.05)
        beat, widths = NORMAL_BEAT, (0.85, 1.15)
    else:
        bpm = rng.uniform(60, 120)
        jitter = rng.uniform(0.04, 0.18)
        beat, widths = ABNORMAL_BEAT, (0.6, 1.15)
    beat = scale_beat(beat, width=rng.uniform(*widths), amplitude=rng.uniform(0.85, 1.15))
    x, _ = synthesize_ecg(
        duration_s, sample_rate_hz, rng=rng, mean_bpm=bpm, jitter=jitter, beat=beat,
        snr_db=rng.uniform(18, 30), width_jitter=rng.uniform(0.02, 0.08),
    )
    x = x + 0.05 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * np.arange(x.size) / sample_rate_hz)
    return EcgRecord(record_id, patient_ref, sample_rate_hz, x, label)


def gaussian_mixture_corpus(
    n_samples: int,
    n_features: int,
    rng: np.random.Generator,
    bayes_accuracy: float = 0.90,
    minority_fraction: float = 0.4,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Two isotropic Gaussian classes with a chosen Bayes-optimal accuracy.

    The class means are separated along a random direction by the
    Mahalanobis distance that gives ``bayes_accuracy`` under equal priors.
    Returns ``(X, y, separation)``.
    """
    from scipy.stats import norm

    separation = 2.0 * norm.ppf(bayes_accuracy)
    direction = rng.standard_normal(n_features)
    direction /= np.linalg.norm(direction)
    y = (rng.random(n_samples) < minority_fraction).astype(np.int64)
    X = rng.standard_normal((n_samples, n_features))
    X += np.outer(y - 0.5, direction * separation)
    return X, y, float(separation)


def bayes_accuracy_equal_priors(separation: float) -> float:
    from scipy.stats import norm

    return float(norm.cdf(separation / 2.0))


def write_corpus(
    root: Path,
    n_normal: int,
    n_abnormal: int,
    seed: int,
    duration_s: float = 20.0,
    sample_rate_hz: int = 360,
) -> Path:
    """Write a demographics CSV and ``normal/``, ``abnormal/`` trace folders."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for cls in ("normal", "abnormal"):
        d = root / "ecg" / cls
        d.mkdir(parents=True, exist_ok=True)
        (d / "meta.json").write_text(json.dumps({"sample_rate_hz": sample_rate_hz}))

    patients = []
    for cls, label, count in (("normal", ClassLabel.NORMAL, n_normal), ("abnormal", ClassLabel.ABNORMAL, n_abnormal)):
        for i in range(count):
            rec = synthetic_record(f"{cls}_{i:04d}", label, rng, duration_s, sample_rate_hz)
            with open(root / "ecg" / cls / f"{rec.record_id}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["index", "millivolts"])
                for j, v in enumerate(rec.samples):
                    w.writerow([j, repr(float(v))])
        # Demographics per class; abnormal patients skew older and smoke more.
        n_pat = max(1, count // 2 + 1)
        for i in range(n_pat):
            older = label == ClassLabel.ABNORMAL
            age = float(np.clip(rng.normal(62 if older else 45, 12), 18, 95))
            patients.append({
                "patient_id": f"P{cls[0].upper()}{i:04d}",
                "age": f"{age:.1f}",
                "sex": "F" if rng.random() < 0.5 else "M",
                "smoker": "yes" if rng.random() < (0.45 if older else 0.2) else "no",
                "cholesterol": f"{rng.normal(235 if older else 200, 30):.1f}",
                "label": cls,
            })
    with open(root / "demographics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(patients[0]))
        w.writeheader()
        w.writerows(patients)
    return root
