"""WAV ingestion and the in-memory audio model.

All downstream processing assumes mono float32 samples at 48 kHz; other
rates are polyphase-resampled on load.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import AudioFormatError

TARGET_RATE = 48000


@dataclass(frozen=True)
class AudioSegment:
    """One channel of continuous audio, pinned to an absolute UTC start time."""

    samples: np.ndarray  # 1-D float32
    sample_rate_hz: int
    channel_id: str
    recorder_id: str
    start_time_utc: float  # POSIX seconds

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    @property
    def end_time_utc(self) -> float:
        return self.start_time_utc + self.duration_s

    def slice_time(self, t0: float, t1: float) -> np.ndarray:
        """Samples covering absolute times [t0, t1), zero-padded at the edges."""
        i0 = int(round((t0 - self.start_time_utc) * self.sample_rate_hz))
        i1 = int(round((t1 - self.start_time_utc) * self.sample_rate_hz))
        n = i1 - i0
        out = np.zeros(max(n, 0), dtype=np.float32)
        lo = max(i0, 0)
        hi = min(i1, len(self.samples))
        if hi > lo:
            out[lo - i0 : hi - i0] = self.samples[lo:hi]
        return out


def _to_float32(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.float32:
        return data
    if data.dtype == np.float64:
        return data.astype(np.float32)
    if data.dtype == np.int16:
        return (data / 32768.0).astype(np.float32)
    if data.dtype == np.int32:
        # scipy widens 24-bit PCM to int32 with the low byte zeroed
        return (data / 2147483648.0).astype(np.float32)
    if data.dtype == np.uint8:
        return ((data.astype(np.float32) - 128.0) / 128.0).astype(np.float32)
    raise AudioFormatError(f"unsupported WAV sample format: {data.dtype}")


def resample_to(samples: np.ndarray, rate_in: int, rate_out: int,
                window=("kaiser", 5.0)) -> np.ndarray:
    """Polyphase resampling; `window` trades quality against speed."""
    if rate_in == rate_out:
        return samples
    frac = Fraction(rate_out, rate_in)
    out = resample_poly(samples.astype(np.float64), frac.numerator,
                        frac.denominator, window=window)
    return out.astype(np.float32)


def load_wav(
    path: str,
    recorder_id: str | None = None,
    start_time_utc: float = 0.0,
    resample: bool = True,
    resample_window=("kaiser", 5.0),
) -> list[AudioSegment]:
    """Read a WAV file into one AudioSegment per channel.

    Accepts PCM 8/16/24-bit int and 32/64-bit float, mono or multichannel.
    Raises AudioFormatError for non-finite samples or, when `resample` is
    off, any rate other than 48 kHz.
    """
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:  # scipy raises bare ValueError on bad headers
        raise AudioFormatError(f"cannot read {path}: {exc}") from exc
    if data.ndim == 1:
        data = data[:, None]
    data = _to_float32(data)
    if not np.all(np.isfinite(data)):
        raise AudioFormatError(f"{path}: non-finite samples")
    if rate != TARGET_RATE:
        if not resample:
            raise AudioFormatError(
                f"{path}: sample rate {rate} != {TARGET_RATE} and resampling disabled")
        data = np.stack(
            [resample_to(data[:, c], rate, TARGET_RATE, resample_window)
             for c in range(data.shape[1])], axis=1)
        rate = TARGET_RATE
    rec = recorder_id if recorder_id is not None else os.path.splitext(os.path.basename(path))[0]
    return [
        AudioSegment(
            samples=np.ascontiguousarray(data[:, c]),
            sample_rate_hz=rate,
            channel_id=f"{rec}.ch{c}",
            recorder_id=rec,
            start_time_utc=start_time_utc,
        )
        for c in range(data.shape[1])
    ]


def iter_blocks(audio: AudioSegment, block_s: float = 60.0,
                min_samples: int = 2048 + 7 * 512) -> Iterator[AudioSegment]:
    """Split audio into non-overlapping blocks; the noise profile is
    re-estimated per block. Trailing blocks too short for quartile
    estimation are dropped."""
    n_block = int(round(block_s * audio.sample_rate_hz))
    for i0 in range(0, len(audio.samples), n_block):
        chunk = audio.samples[i0 : i0 + n_block]
        if len(chunk) < min_samples:
            continue
        yield replace(
            audio,
            samples=chunk,
            start_time_utc=audio.start_time_utc + i0 / audio.sample_rate_hz,
        )


def write_wav(path: str, samples: np.ndarray | Sequence[np.ndarray],
              rate: int = TARGET_RATE) -> None:
    """Write mono or multichannel float samples as 16-bit PCM."""
    if isinstance(samples, (list, tuple)):
        samples = np.stack(samples, axis=1)
    scaled = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    wavfile.write(path, rate, (scaled * 32767.0).astype(np.int16))
