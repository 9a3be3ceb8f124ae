"""WAV loading and sample-rate conversion."""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly


def load_wav(path: str) -> tuple[np.ndarray, int]:
    """Read a WAV file as float64 in [-1, 1], shape (samples,) or (samples, 2)."""
    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    data = data.astype(np.float64)
    return data, int(rate)


def to_mono(samples: np.ndarray) -> np.ndarray:
    if samples.ndim == 1:
        return samples
    return samples.mean(axis=1)


def resample(samples: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Polyphase resampling; identity when the rates already match."""
    if rate_in == rate_out:
        return samples
    g = np.gcd(rate_in, rate_out)
    return resample_poly(samples, rate_out // g, rate_in // g, axis=0)
