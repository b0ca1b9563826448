import numpy as np
import pytest

from chirpkit.audio import AudioSegment
from chirpkit.frontend import (
    N_POOLED_ROWS,
    NormalizedSpectrogram,
    Provenance,
    make_tfr,
)

SR = 48000


def tone(freq_hz, duration_s, amplitude=1.0, sr=SR, phase=0.0):
    t = np.arange(int(round(duration_s * sr))) / sr
    return (amplitude * np.sin(2 * np.pi * freq_hz * t + phase)).astype(np.float32)


def audio_segment(samples, channel="test.ch0", recorder="test", start=0.0):
    return AudioSegment(
        samples=np.asarray(samples, dtype=np.float32),
        sample_rate_hz=SR,
        channel_id=channel,
        recorder_id=recorder,
        start_time_utc=start,
    )


def gaussian_blob(shape, row, col, sigma_r, sigma_c, peak=1.0):
    """Dense 2-D Gaussian bump, clipped to [0, 1]."""
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    g = peak * np.exp(-(((rr - row) / sigma_r) ** 2 + ((cc - col) / sigma_c) ** 2) / 2)
    return np.clip(g, 0.0, 1.0).astype(np.float32)


def nspec_from(values, start=0.0):
    return NormalizedSpectrogram(values=np.asarray(values, dtype=np.float32),
                                 hop_s=512 / SR, start_time_utc=start)


def synthetic_tfr(width=100, fill=0.5, row_band=(40, 80), seed=None):
    """A dense rectangular TFR for shape-contract tests."""
    vals = np.zeros((N_POOLED_ROWS, width), dtype=np.float32)
    r0, r1 = row_band
    if seed is None:
        vals[r0:r1, :] = fill
    else:
        rng = np.random.default_rng(seed)
        vals[r0:r1, :] = rng.uniform(0.1, 1.0, size=(r1 - r0, width)).astype(np.float32)
    prov = Provenance(source="synthetic", channel_id="test.ch0",
                      recorder_id="test", start_time=0.0,
                      t_span=(0, width - 1), f_span=row_band)
    return make_tfr(vals, prov)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
