"""Cross-channel pair mining.

A recorder carries two time-synchronized microphones; the same
vocalization shows up on both channels within a few milliseconds. TFRs
whose spans overlap are validated by normalized cross-correlation of
the band-passed raw audio, and high-correlation pairs become the
self-supervised "same" examples for the contrastive stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .audio import AudioSegment
from .errors import DataError
from .frontend import TFR


@dataclass
class PairMinerConfig:
    max_lag_s: float = 0.05
    xcorr_threshold: float = 0.5
    sync_tolerance_s: float = 0.001
    min_band_hz: float = 50.0


@dataclass(frozen=True)
class TfrPair:
    tfr_a_id: str
    tfr_b_id: str
    xcorr_peak: float
    lag_s: float  # positive: the event arrives later on channel b


def normalized_xcorr(x: np.ndarray, y: np.ndarray,
                     max_lag: int) -> tuple[float, int]:
    """Peak Pearson correlation of x[t] against y[t+k] over |k| <= max_lag.

    Per-lag zero-mean unit-energy normalization over the overlapped
    window; degenerate overlaps (constant or too short) score 0.
    Returns (peak, argmax lag in samples).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m = len(x)
    if len(y) != m:
        raise DataError("xcorr inputs must have equal length")
    max_lag = int(min(max_lag, m - 1))
    if max_lag < 0 or m < 8:
        return 0.0, 0

    # raw[m - 1 + k] = sum_t x[t] * y[t + k]
    raw = signal.correlate(y, x, mode="full", method="fft")
    cx = np.concatenate([[0.0], np.cumsum(x)])
    cy = np.concatenate([[0.0], np.cumsum(y)])
    cx2 = np.concatenate([[0.0], np.cumsum(x * x)])
    cy2 = np.concatenate([[0.0], np.cumsum(y * y)])

    lags = np.arange(-max_lag, max_lag + 1)
    kk = np.abs(lags)
    n = (m - kk).astype(np.float64)
    neg = lags < 0
    # overlap sums: x keeps its head for k >= 0 and its tail for k < 0
    sx = np.where(neg, cx[m] - cx[kk], cx[m - kk])
    sx2 = np.where(neg, cx2[m] - cx2[kk], cx2[m - kk])
    sy = np.where(neg, cy[m - kk], cy[m] - cy[kk])
    sy2 = np.where(neg, cy2[m - kk], cy2[m] - cy2[kk])
    num = raw[m - 1 + lags] - sx * sy / n
    vx = np.maximum(sx2 - sx * sx / n, 0.0)
    vy = np.maximum(sy2 - sy * sy / n, 0.0)
    den = np.sqrt(vx * vy)
    ok = (den > 1e-12) & (n >= 8)
    r = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    best = int(np.argmax(r))
    return float(r[best]), int(lags[best])


def _band_pass(x: np.ndarray, lo: float, hi: float, sr: int) -> np.ndarray:
    nyq = sr / 2.0
    lo = max(lo, 30.0)
    hi = min(hi, 0.99 * nyq)
    if hi - lo < 10.0:
        return x
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    if len(x) < 64:
        return x
    return signal.sosfiltfilt(sos, x)


def _check_resolvable(tfrs, audio: AudioSegment, which: str,
                      tol: float) -> None:
    for t in tfrs:
        p = t.provenance
        if p.channel_id != audio.channel_id or p.recorder_id != audio.recorder_id:
            raise DataError(f"TFR {t.id!r} provenance does not resolve into "
                            f"audio_{which} ({p.channel_id} vs {audio.channel_id})")
        if p.start_time < audio.start_time_utc - tol or \
                t.end_time > audio.end_time_utc + tol:
            raise DataError(f"TFR {t.id!r} span falls outside audio_{which}")


def mine_pairs(tfrs_a: list[TFR], tfrs_b: list[TFR],
               audio_a: AudioSegment, audio_b: AudioSegment,
               cfg: PairMinerConfig | None = None) -> list[TfrPair]:
    """Greedy best-peak one-to-one matching of cross-channel TFRs.

    Candidates are span-overlapping TFRs (allowing +-max_lag_s); each is
    scored by the normalized cross-correlation of the two band-passed
    audio snippets over the union window, and pairs are emitted in
    descending peak order while both ids are unused.
    """
    cfg = cfg or PairMinerConfig()
    if audio_a.recorder_id != audio_b.recorder_id:
        raise DataError("channels belong to different recorders")
    if audio_a.channel_id == audio_b.channel_id:
        raise DataError("pair mining needs two distinct channels")
    if abs(audio_a.start_time_utc - audio_b.start_time_utc) > cfg.sync_tolerance_s:
        raise DataError("channels are not time-synchronized "
                        f"(start offset {abs(audio_a.start_time_utc - audio_b.start_time_utc):.4f} s)")
    if audio_a.sample_rate_hz != audio_b.sample_rate_hz:
        raise DataError("channel sample rates differ")
    _check_resolvable(tfrs_a, audio_a, "a", cfg.sync_tolerance_s)
    _check_resolvable(tfrs_b, audio_b, "b", cfg.sync_tolerance_s)

    sr = audio_a.sample_rate_hz
    max_lag_n = int(round(cfg.max_lag_s * sr))
    candidates = []
    for i, ta in enumerate(tfrs_a):
        for j, tb in enumerate(tfrs_b):
            if ta.provenance.start_time > tb.end_time + cfg.max_lag_s:
                continue
            if tb.provenance.start_time > ta.end_time + cfg.max_lag_s:
                continue
            t0 = min(ta.provenance.start_time, tb.provenance.start_time) - cfg.max_lag_s
            t1 = max(ta.end_time, tb.end_time) + cfg.max_lag_s
            x = audio_a.slice_time(t0, t1)
            y = audio_b.slice_time(t0, t1)
            a_lo, a_hi = ta.freq_range_hz()
            b_lo, b_hi = tb.freq_range_hz()
            lo, hi = min(a_lo, b_lo), max(a_hi, b_hi)
            if hi - lo < cfg.min_band_hz:
                hi = lo + cfg.min_band_hz
            x = _band_pass(x, lo, hi, sr)
            y = _band_pass(y, lo, hi, sr)
            peak, lag_n = normalized_xcorr(x, y, max_lag_n)
            if peak >= cfg.xcorr_threshold:
                candidates.append((peak, lag_n / sr, i, j))

    # symmetric tie-break so mining (B, A) yields the same matching
    def order_key(c):
        peak, _, i, j = c
        ids = sorted((tfrs_a[i].id, tfrs_b[j].id))
        return (-peak, ids[0], ids[1])

    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs = []
    for peak, lag_s, i, j in sorted(candidates, key=order_key):
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append(TfrPair(tfr_a_id=tfrs_a[i].id, tfr_b_id=tfrs_b[j].id,
                             xcorr_peak=round(float(peak), 6),
                             lag_s=round(float(lag_s), 6)))
    pairs.sort(key=lambda p: (p.tfr_a_id, p.tfr_b_id))
    return pairs
