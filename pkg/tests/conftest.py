from __future__ import annotations

import numpy as np
import pytest

from ecgmon.signal import apply_filter


def measure_gain(filt, freq_hz: float, fs: float, seconds: float = 20.0) -> float:
    """Steady-state amplitude ratio of a sinusoid through the causal filter.

    The output tail is fitted by least squares to a*sin + b*cos at the
    input frequency, so the estimate does not depend on sample alignment.
    """
    n = int(seconds * fs)
    t = np.arange(n) / fs
    y = apply_filter(filt, np.sin(2 * np.pi * freq_hz * t))
    tail = slice(n // 2, n)
    basis = np.column_stack([np.sin(2 * np.pi * freq_hz * t[tail]), np.cos(2 * np.pi * freq_hz * t[tail])])
    coef, *_ = np.linalg.lstsq(basis, y[tail], rcond=None)
    return float(np.hypot(*coef))


def analog_butterworth(f, fc, order):
    return 1.0 / np.sqrt(1.0 + (np.asarray(f, dtype=float) / fc) ** (2 * order))


def warped_butterworth(f, fc, order, fs):
    """Magnitude of the bilinear-transformed Butterworth, computed from the frequency warp."""
    w = np.tan(np.pi * np.asarray(f, dtype=float) / fs) / np.tan(np.pi * fc / fs)
    return 1.0 / np.sqrt(1.0 + w ** (2 * order))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference_check(model, X, y, h: float = 1e-5, floor: float = 1e-4):
    """Worst relative error between backprop and central differences over every parameter.

    Errors use ``|a - n| / max(|a|, |n|, floor)``; the floor keeps entries whose
    true gradient is zero (biases ahead of batch normalization) from dividing
    rounding noise by itself.
    """
    from ecgmon.nn import backward, bce_loss, forward

    _, cache = forward(model, X, "train")
    grads = backward(model, cache, y)
    worst = 0.0
    where = None
    for name, param, grad in zip(model.parameter_names(), model.parameters(), grads):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + h
            up = bce_loss(forward(model, X, "train")[0], y)
            flat[k] = keep - h
            down = bce_loss(forward(model, X, "train")[0], y)
            flat[k] = keep
            num = (up - down) / (2 * h)
            err = abs(gflat[k] - num) / max(abs(gflat[k]), abs(num), floor)
            if err > worst:
                worst, where = err, (name, k)
    return worst, where


def separable_set(seed: int, n: int = 64, d: int = 8):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=d)
    X = rng.normal(size=(n, d))
    Xv = rng.normal(size=(n, d))
    return X, (X @ w > 0).astype(float), Xv, (Xv @ w > 0).astype(float)
