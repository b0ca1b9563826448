"""Transient extraction: spectrogram, robust per-band normalization,
impulse blanking, watershed segmentation, and TFR isolation.

The unit of output is a TFR: a 128-row matrix of [0,1] energies holding one
isolated time-frequency blob, zero outside its generating region.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage
from skimage.morphology import h_maxima
from skimage.segmentation import watershed

from .audio import AudioSegment, iter_blocks
from .errors import DataError

FFT_SIZE = 2048
HOP = 512
N_RAW_ROWS = 640          # contiguous FFT bins kept before pooling
POOL = 5                  # frequency max-pool factor: 640 -> 128 rows
N_POOLED_ROWS = 128
FIXED_WIDTH = 256
DB_EPS = 1e-12
BAND_START_BIN = 22       # 515.625 Hz at 48 kHz / 2048 bins


@dataclass(frozen=True)
class FrontendConfig:
    sigma_floor_db: float = 0.5
    blank_mean_thresh: float = 0.3
    blank_var_thresh: float = 0.02
    dilation_freq: int = 3
    dilation_time: int = 7
    marker_h: float = 0.15
    min_duration_bins: int = 6
    min_tb_product: int = 60
    block_s: float = 60.0


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray       # (640, n_time) dB
    freq_axis_hz: np.ndarray  # (640,) row center frequencies
    hop_s: float
    start_time_utc: float = 0.0


@dataclass(frozen=True)
class NoiseProfile:
    median_db: np.ndarray  # (640,)
    sigma_db: np.ndarray   # (640,), clamped to >= sigma_floor


@dataclass(frozen=True)
class NormalizedSpectrogram:
    values: np.ndarray  # (128, n_time) in [0,1]
    hop_s: float
    start_time_utc: float = 0.0


@dataclass(frozen=True)
class Region:
    """One watershed basin. `cells` are (row, col) pairs, 8-connected."""

    cells: np.ndarray  # (n, 2) int32
    t_span: tuple[int, int]
    f_span: tuple[int, int]

    @property
    def duration_bins(self) -> int:
        return self.t_span[1] - self.t_span[0] + 1

    @property
    def size(self) -> int:
        return len(self.cells)


@dataclass(frozen=True)
class Provenance:
    source: str
    channel_id: str
    recorder_id: str
    start_time: float        # UTC seconds of the first TFR column
    t_span: tuple[int, int]  # column range within the processing block
    f_span: tuple[int, int]  # pooled row range

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "channel_id": self.channel_id,
            "recorder_id": self.recorder_id,
            "start_time": self.start_time,
            "t_span": list(self.t_span),
            "f_span": list(self.f_span),
        }

    @staticmethod
    def from_dict(d: dict) -> "Provenance":
        return Provenance(
            source=d["source"],
            channel_id=d["channel_id"],
            recorder_id=d["recorder_id"],
            start_time=float(d["start_time"]),
            t_span=tuple(d["t_span"]),
            f_span=tuple(d["f_span"]),
        )


@dataclass(frozen=True)
class TFR:
    values: np.ndarray  # (128, w) float32 in [0,1], zero outside the region mask
    provenance: Provenance
    id: str = field(default="")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def end_time(self) -> float:
        return self.provenance.start_time + self.width * HOP / 48000.0

    def freq_range_hz(self) -> tuple[float, float]:
        r0, r1 = self.provenance.f_span
        df = 48000.0 / FFT_SIZE
        return ((BAND_START_BIN + POOL * r0) * df,
                (BAND_START_BIN + POOL * r1 + POOL - 1) * df)


@dataclass(frozen=True)
class FixedTFR:
    values: np.ndarray  # (128, 256) float32 in [0,1]
    pad_offset: int     # left zero columns (>=0) or -crop_start (<0)
    tfr_id: str = ""
    provenance: Provenance | None = None


def tfr_id_for(values: np.ndarray, provenance: Provenance) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(values, dtype=np.float32).tobytes())
    h.update(repr(provenance.to_dict()).encode())
    return h.hexdigest()[:16]


def make_tfr(values: np.ndarray, provenance: Provenance) -> TFR:
    values = np.ascontiguousarray(values, dtype=np.float32)
    return TFR(values=values, provenance=provenance,
               id=tfr_id_for(values, provenance))


def compute_spectrogram(audio: AudioSegment, cfg: FrontendConfig | None = None) -> Spectrogram:
    """STFT magnitude in dB: 2048-point FFT, Hamming window, hop 512.

    Keeps 640 contiguous bins starting at 515.625 Hz so that factor-5
    pooling later yields exactly 128 rows. No edge padding: columns =
    floor((n - 2048) / 512) + 1.
    """
    x = audio.samples
    if audio.sample_rate_hz != 48000:
        raise DataError(f"expected 48 kHz input, got {audio.sample_rate_hz}")
    if len(x) < FFT_SIZE:
        raise DataError(f"audio too short: {len(x)} < {FFT_SIZE} samples")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite samples")
    n_cols = (len(x) - FFT_SIZE) // HOP + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, FFT_SIZE)[::HOP][:n_cols]
    window = np.hamming(FFT_SIZE)
    spec = np.fft.rfft(frames * window, axis=1)
    mag = np.abs(spec[:, BAND_START_BIN : BAND_START_BIN + N_RAW_ROWS]).T
    db = 20.0 * np.log10(mag + DB_EPS)
    freqs = (np.arange(BAND_START_BIN, BAND_START_BIN + N_RAW_ROWS)
             * (audio.sample_rate_hz / FFT_SIZE))
    return Spectrogram(values=db, freq_axis_hz=freqs,
                       hop_s=HOP / audio.sample_rate_hz,
                       start_time_utc=audio.start_time_utc)


def estimate_noise(spec: Spectrogram, sigma_floor_db: float = 0.5) -> NoiseProfile:
    """Per-row median and IQR-derived spread over time.

    sigma = IQR / 1.349 (Gaussian-consistent), clamped to sigma_floor so
    silent bands cannot collapse the normalization.
    """
    if spec.values.shape[1] < 8:
        raise DataError(f"too few columns for quartiles: {spec.values.shape[1]} < 8")
    q25, med, q75 = np.percentile(spec.values, [25, 50, 75], axis=1)
    sigma = np.maximum((q75 - q25) / 1.349, sigma_floor_db)
    return NoiseProfile(median_db=med, sigma_db=sigma)


def normalize(spec: Spectrogram, noise: NoiseProfile) -> NormalizedSpectrogram:
    """Per row: clip((x - (median + 2 sigma)) / (2 sigma), 0, 1), then
    non-overlapping factor-5 max-pool along frequency (640 -> 128 rows)."""
    if noise.median_db.shape[0] != spec.values.shape[0]:
        raise DataError("noise profile rows do not align with spectrogram rows")
    two_sigma = 2.0 * noise.sigma_db[:, None]
    z = (spec.values - (noise.median_db[:, None] + two_sigma)) / two_sigma
    z = np.clip(z, 0.0, 1.0)
    n_t = z.shape[1]
    pooled = z.reshape(N_POOLED_ROWS, POOL, n_t).max(axis=1)
    return NormalizedSpectrogram(values=pooled, hop_s=spec.hop_s,
                                 start_time_utc=spec.start_time_utc)


def blank_impulsive(nspec: NormalizedSpectrogram,
                    cfg: FrontendConfig | None = None) -> NormalizedSpectrogram:
    """Zero columns that are broadband and flat: mean over rows above
    `blank_mean_thresh` AND variance below `blank_var_thresh`."""
    cfg = cfg or FrontendConfig()
    v = nspec.values
    col_mean = v.mean(axis=0)
    col_var = v.var(axis=0)
    kill = (col_mean > cfg.blank_mean_thresh) & (col_var < cfg.blank_var_thresh)
    if not kill.any():
        return nspec
    out = v.copy()
    out[:, kill] = 0.0
    return NormalizedSpectrogram(values=out, hop_s=nspec.hop_s,
                                 start_time_utc=nspec.start_time_utc)


def segment(nspec: NormalizedSpectrogram,
            dilation: tuple[int, int] = (3, 7),
            marker_h: float = 0.15) -> list[Region]:
    """Watershed split of the energetic support into disjoint regions.

    Binary mask = values > 0, dilated by a df x dt rectangle so that close
    blobs share a region. Markers are the h-maxima of anisotropically
    smoothed energy restricted to the dilated mask: only peaks that
    rise at least `marker_h` above their surrounding saddle seed a basin,
    so STFT speckle along a single sweeping call cannot shatter it. The
    watershed floods the negated energy within the mask; each basin is
    one region, 8-connected by construction.
    """
    v = nspec.values
    mask = v > 0
    if not mask.any():
        return []
    df, dt = dilation
    dilated = ndimage.binary_dilation(mask, structure=np.ones((df, dt), dtype=bool))
    # Anisotropic: narrow in frequency so stacked calls keep distinct
    # peaks, wide in time so one sweeping call reads as a single ridge.
    smoothed = ndimage.gaussian_filter(v, sigma=(1.0, 4.0), mode="constant")
    restricted = np.where(dilated, smoothed, 0.0)
    peaks = h_maxima(restricted, marker_h)
    marker_mask = peaks.astype(bool) & dilated & (smoothed > 0)
    markers, n_markers = ndimage.label(marker_mask, structure=np.ones((3, 3), dtype=bool))
    if n_markers == 0:
        return []
    basins = watershed(-smoothed, markers=markers, mask=dilated, connectivity=2)
    regions: list[Region] = []
    for lbl in range(1, n_markers + 1):
        cells = np.argwhere(basins == lbl).astype(np.int32)
        if len(cells) == 0:
            continue
        rows = cells[:, 0]
        cols = cells[:, 1]
        regions.append(Region(
            cells=cells,
            t_span=(int(cols.min()), int(cols.max())),
            f_span=(int(rows.min()), int(rows.max())),
        ))
    return regions


def filter_regions(regions: Iterable[Region],
                   cfg: FrontendConfig | None = None) -> list[Region]:
    """Drop regions shorter than `min_duration_bins` columns or smaller
    than `min_tb_product` cells."""
    cfg = cfg or FrontendConfig()
    return [r for r in regions
            if r.duration_bins >= cfg.min_duration_bins
            and r.size >= cfg.min_tb_product]


def extract_tfrs(nspec: NormalizedSpectrogram, regions: Iterable[Region],
                 source: str = "", channel_id: str = "",
                 recorder_id: str = "") -> list[TFR]:
    """One TFR per region: the region's column span, all 128 rows, values
    copied at mask cells and zero elsewhere."""
    out = []
    for r in regions:
        c0, c1 = r.t_span
        vals = np.zeros((N_POOLED_ROWS, c1 - c0 + 1), dtype=np.float32)
        rows = r.cells[:, 0]
        cols = r.cells[:, 1]
        vals[rows, cols - c0] = nspec.values[rows, cols]
        prov = Provenance(
            source=source,
            channel_id=channel_id,
            recorder_id=recorder_id,
            start_time=nspec.start_time_utc + c0 * nspec.hop_s,
            t_span=r.t_span,
            f_span=r.f_span,
        )
        out.append(make_tfr(vals, prov))
    return out


def to_fixed(tfr: TFR, rng_seed: int) -> FixedTFR:
    """Convert to the constant 256-column form.

    Width above 256: uniformly-random contiguous crop. At or below 256:
    the missing columns are split uniformly at random between left and
    right zero padding. Deterministic for a given seed; different seeds
    move the content, which is the intended on-the-fly augmentation.
    """
    rng = np.random.default_rng(rng_seed)
    w = tfr.width
    if w > FIXED_WIDTH:
        start = int(rng.integers(0, w - FIXED_WIDTH + 1))
        vals = tfr.values[:, start : start + FIXED_WIDTH].copy()
        offset = -start
    else:
        left = int(rng.integers(0, FIXED_WIDTH - w + 1))
        vals = np.zeros((N_POOLED_ROWS, FIXED_WIDTH), dtype=np.float32)
        vals[:, left : left + w] = tfr.values
        offset = left
    return FixedTFR(values=vals, pad_offset=offset, tfr_id=tfr.id,
                    provenance=tfr.provenance)


def to_fixed_near(tfr: TFR, anchor: FixedTFR, rng_seed: int,
                  max_shift: int = 25) -> FixedTFR:
    """Fixed view placed within max_shift columns of an anchor's offset.

    Cross-channel views of one event differ by clock lag and segmentation
    jitter, never by arbitrary translation; paired training views keep
    that bounded misalignment instead of two independent placements.
    """
    rng = np.random.default_rng(rng_seed)
    target = anchor.pad_offset + int(rng.integers(-max_shift, max_shift + 1))
    w = tfr.width
    if w > FIXED_WIDTH:
        start = min(max(-target, 0), w - FIXED_WIDTH)
        vals = tfr.values[:, start : start + FIXED_WIDTH].copy()
        offset = -start
    else:
        left = min(max(target, 0), FIXED_WIDTH - w)
        vals = np.zeros((N_POOLED_ROWS, FIXED_WIDTH), dtype=np.float32)
        vals[:, left : left + w] = tfr.values
        offset = left
    return FixedTFR(values=vals, pad_offset=offset, tfr_id=tfr.id,
                    provenance=tfr.provenance)


def extract_from_audio(audio: AudioSegment, cfg: FrontendConfig | None = None,
                       source: str | None = None) -> list[TFR]:
    """Full chain over one channel: per 60 s block, spectrogram -> noise ->
    normalize -> blank -> segment -> filter -> TFRs."""
    cfg = cfg or FrontendConfig()
    if source is None:
        source = audio.recorder_id
    tfrs: list[TFR] = []
    for block in iter_blocks(audio, cfg.block_s):
        spec = compute_spectrogram(block, cfg)
        noise = estimate_noise(spec, cfg.sigma_floor_db)
        nspec = blank_impulsive(normalize(spec, noise), cfg)
        regions = filter_regions(
            segment(nspec, (cfg.dilation_freq, cfg.dilation_time),
                    cfg.marker_h), cfg)
        tfrs.extend(extract_tfrs(
            nspec, regions,
            source=source,
            channel_id=audio.channel_id,
            recorder_id=audio.recorder_id,
        ))
    return tfrs
