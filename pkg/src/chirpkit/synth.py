"""Synthetic two-channel corpus generator.

Renders parameterized chirp archetypes into short stereo recordings:
channel 1 carries the same call as channel 0, delayed by a few
milliseconds and slightly attenuated, over independent background
noise. Broadband noise bursts act as non-bird confusers. The generator
is fully deterministic per seed so that repeated runs are byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import DataError
from .models.classifier import ClassDef, ClassTaxonomy, SpeciesDef

SR = 48000
BASE_UTC = 1_614_556_800.0  # 2021-03-01T00:00:00Z; synthetic schedule origin


@dataclass(frozen=True)
class CallSpec:
    """One vocalization archetype. Frequencies in Hz, durations in s."""

    class_id: str
    kind: str            # up | down | trill | am
    f_a: float           # sweep start / carrier
    f_b: float           # sweep end / modulation deviation
    rate_hz: float       # FM or AM modulation rate (0 for sweeps)
    base_dur_s: float


# Eight band-disjoint archetypes spanning the analysis band. Neighboring
# bands are separated enough that per-class frequency jitter cannot
# cause overlap.
CLASS_SPECS = (
    CallSpec("c0", "up", 900.0, 1700.0, 0.0, 0.60),
    CallSpec("c1", "down", 2600.0, 1900.0, 0.0, 0.65),
    CallSpec("c2", "trill", 3300.0, 160.0, 25.0, 0.70),
    CallSpec("c3", "am", 4300.0, 0.35, 8.0, 0.80),
    CallSpec("c4", "up", 5200.0, 6800.0, 0.0, 0.55),
    CallSpec("c5", "trill", 7800.0, 200.0, 6.0, 0.75),
    CallSpec("c6", "down", 10500.0, 9000.0, 0.0, 0.60),
    CallSpec("c7", "am", 12500.0, 0.5, 30.0, 0.70),
)

# Body level relative to the channel noise floor. The hook rides ~9-10 dB
# above this and may clip at the normalization ceiling; the body must stay
# below the ceiling (clipped texture carries no amplitude information and
# degrades reconstruction targets toward a binary mask) while clearing the
# mask threshold often enough to keep its region connected. Spread is
# uniform in dB.
CALL_AMP = 0.0022
CALL_AMP_SPREAD_DB = 1.5


def synth_taxonomy(n_classes: int = 8) -> ClassTaxonomy:
    if n_classes < 1 or n_classes > len(CLASS_SPECS):
        raise DataError(f"n_classes must be in [1, {len(CLASS_SPECS)}]")
    species = [SpeciesDef(f"s{i}", f"synthetic whistler {i}",
                          f"Syntheticus vox{i}", 900000 + i)
               for i in range(n_classes)]
    classes = [ClassDef(f"c{i}", f"call type {i}", f"s{i}")
               for i in range(n_classes)]
    classes.append(ClassDef("SINK", "non-bird sink", None))
    return ClassTaxonomy(classes=classes, species=species)


def _snap_hz(f: float, grid_hz: float = SR / 2048.0) -> float:
    # held pitches sit on the analysis grid: an off-grid tone loses up to
    # 4 dB to scalloping, which would make hook level a per-draw lottery
    return round(f / grid_hz) * grid_hz


def render_call(spec: CallSpec, rng: np.random.Generator,
                sr: int = SR) -> tuple[np.ndarray, float, float]:
    """One jittered realization. Returns (samples, f_lo_hz, f_hi_hz).

    Every call opens with a short flat introductory note (the hook) a
    few dB above the modulated body. A held pitch concentrates all its
    energy into one spectrogram cell per frame, so the hook is the
    loudest, most compact structure in the call by construction; the
    body's frequency modulation keeps any other cell from dwelling long
    enough to compete. That pins each call's peak neighborhood to a
    known small patch regardless of how hot the overall level runs.
    """
    dur = spec.base_dur_s * rng.uniform(0.9, 1.1)
    fj = rng.uniform(0.97, 1.03)
    amp = CALL_AMP * 10.0 ** (rng.uniform(-CALL_AMP_SPREAD_DB, 0.0) / 20.0)
    if spec.kind == "trill":
        # rapid FM scatters energy across cells; compensate the level so a
        # trill's smoothed ridge clears detection like the other kinds
        amp *= 1.25
    n = int(round(dur * sr))
    t = np.arange(n) / sr
    # long enough to fill whole analysis frames, short enough that even a
    # clipped hook's ties stay inside a small neighborhood
    hook_s = rng.uniform(0.055, 0.070)
    # the hook dominates outright: ~9-10 dB over the body puts every body
    # cell well below the normalization ceiling even when the hook clips,
    # so a call's hottest cells all sit inside the hook's little patch.
    # the clipped hook also guarantees the segmenter a marker, which frees
    # the body from having to carry detection on its own level
    hook_gain = rng.uniform(2.8, 3.2)
    # body time, zero during the hook
    tb = np.maximum(t - hook_s, 0.0)
    body_dur = max(dur - hook_s, 1e-6)
    # shallow slow vibrato on the body; a ruler-flat tone occupies a
    # single pooled row and weak events then fall under the area minimum
    vib = rng.uniform(40.0, 90.0)
    vib_rate = rng.uniform(2.5, 5.0)
    vib_dev = vib * np.sin(2 * np.pi * vib_rate * tb)
    env_mod = np.ones(n)
    if spec.kind in ("up", "down"):
        f0, f1 = spec.f_a * fj, spec.f_b * fj
        # sweep endpoints pulled inward so vibrato stays inside the band
        s = vib + 2 * vib_rate
        lo, hi = min(f0, f1) + s, max(f0, f1) - s
        g0, g1 = (lo, hi) if f0 < f1 else (hi, lo)
        g0 = _snap_hz(g0)
        f_inst = g0 + (g1 - g0) * tb / body_dur + vib_dev
        f_lo, f_hi = min(f0, f1), max(f0, f1)
    elif spec.kind == "trill":
        fc, dev = _snap_hz(spec.f_a * fj), spec.f_b
        f_inst = fc + dev * np.sin(2 * np.pi * spec.rate_hz * tb)
        f_lo, f_hi = fc - dev - 2 * spec.rate_hz, fc + dev + 2 * spec.rate_hz
    elif spec.kind == "am":
        fc, depth = _snap_hz(spec.f_a * fj), spec.f_b
        f_inst = fc + vib_dev
        # depth modulation starts at full level so the hook joins smoothly
        env_mod = (1.0 - depth) + depth * 0.5 * (
            1.0 + np.cos(2 * np.pi * spec.rate_hz * tb))
        f_lo = fc - 2 * spec.rate_hz - vib - 2 * vib_rate
        f_hi = fc + 2 * spec.rate_hz + vib + 2 * vib_rate
    else:
        raise DataError(f"unknown call kind {spec.kind!r}")
    wave = env_mod * np.sin(2 * np.pi * np.cumsum(f_inst) / sr)
    # fast attack so the ramp never buries the hook; fractional decay
    attack = rng.uniform(0.010, 0.025)
    decay = rng.uniform(0.08, 0.25)
    env = np.ones(n)
    na, nd = int(attack * sr), int(decay * n)
    if 0 < na < n:
        env[:na] = 0.5 * (1.0 - np.cos(np.pi * np.arange(na) / na))
    if nd > 0:
        env[n - nd:] = 0.5 * (1.0 - np.cos(np.pi * np.arange(nd, 0, -1) / nd))
    # hook boost easing into the body over 10 ms
    env *= hook_gain + (1.0 - hook_gain) * np.clip(tb / 0.010, 0.0, 1.0)
    # slow level wobble: real calls swell and fade, and the in-ridge
    # gradients it leaves survive normalization
    w = rng.uniform(0.05, 0.12)
    env *= (1.0 - w) + w * 0.5 * (1.0 - np.cos(
        2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi)))
    taper = signal.windows.tukey(n, alpha=min(1.0, 2 * 0.015 / dur))
    return (amp * wave * env * taper).astype(np.float64), float(f_lo), float(f_hi)


def render_confuser(rng: np.random.Generator,
                    sr: int = SR) -> tuple[np.ndarray, float, float]:
    """Band-limited noise burst; broadband relative to any call."""
    dur = rng.uniform(0.12, 0.3)
    lo = rng.uniform(800.0, 9000.0)
    hi = lo + rng.uniform(1500.0, 4000.0)
    n = int(round(dur * sr))
    burst = rng.normal(size=n)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    burst = signal.sosfiltfilt(sos, burst)
    burst *= signal.windows.tukey(n, alpha=0.25)
    peak = np.max(np.abs(burst))
    if peak > 0:
        burst = burst / peak * rng.uniform(0.15, 0.3)
    return burst, float(lo), float(hi)


def _derive_rng(seed: int, *parts: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(parts))
    return np.random.default_rng(ss)


def _write_stereo(path: str, ch0: np.ndarray, ch1: np.ndarray) -> None:
    stereo = np.stack([ch0, ch1], axis=1)
    pcm = np.clip(stereo, -1.0, 1.0)
    wavfile.write(path, SR, (pcm * 32767.0).astype(np.int16))


EVENTS_PER_FILE = 3


def synth_corpus(out_dir: str, classes: int = 8, per_class: int = 30,
                 seed: int = 7, n_confusers: int = 60,
                 duration_s: float = 8.0, noise_sd: float = 0.008) -> dict:
    """Write the corpus under out_dir and return a summary dict.

    Layout: audio/<file>.wav (stereo), truth.jsonl, taxonomy.json,
    recording_log.jsonl, manifest.json. Call events appear on both
    channels with a 2-10 ms lag; confusers are correlated across
    channels too (a nearby transient reaches both microphones).

    Files carry EVENTS_PER_FILE time-separated events of rotating
    classes. Keeping any one frequency band occupied for only a small
    fraction of the file matters: the frontend's per-row noise spread
    is estimated from the file itself, and a band busy for much of the
    recording would inflate its own threshold.
    """
    if per_class < 1:
        raise DataError("per_class must be >= 1")
    if duration_s < 2.0 * EVENTS_PER_FILE + 2.0:
        raise DataError(f"duration_s too short for {EVENTS_PER_FILE} events")
    audio_dir = os.path.join(out_dir, "audio")
    os.makedirs(audio_dir, exist_ok=True)

    taxonomy = synth_taxonomy(classes)
    taxonomy.to_json_file(os.path.join(out_dir, "taxonomy.json"))

    specs = CLASS_SPECS[:classes]
    truth_rows: list[dict] = []
    log_rows: list[dict] = []
    n_samples = int(round(duration_s * SR))
    slot_s = duration_s / EVENTS_PER_FILE

    def emit_file(file_id: str, file_idx: int, events: list[tuple], rng) -> None:
        # events: (samples, class_id, f_lo, f_hi) placed one per time slot
        start_utc = BASE_UTC + (file_idx % 24) * 3600.0 + (file_idx // 24) * 60.0
        ch0 = rng.normal(0.0, noise_sd, size=n_samples)
        ch1 = rng.normal(0.0, noise_sd, size=n_samples)
        wav_name = f"{file_id}.wav"
        for slot, (event, class_id, f_lo, f_hi) in enumerate(events):
            lag_n = int(round(rng.uniform(0.002, 0.010) * SR))
            gain_b = rng.uniform(0.92, 1.0)
            lo = slot * slot_s + 0.5
            hi = (slot + 1) * slot_s - len(event) / SR - 0.5
            on_n = int(round(rng.uniform(lo, hi) * SR))
            ch0[on_n : on_n + len(event)] += event
            ch1[on_n + lag_n : on_n + lag_n + len(event)] += gain_b * event
            truth_rows.append({
                "event_id": f"{file_id}-s{slot}",
                "file": wav_name,
                "recorder_id": file_id,
                "class_id": class_id,
                "t_on": round(start_utc + on_n / SR, 6),
                "t_off": round(start_utc + (on_n + len(event)) / SR, 6),
                "f_lo_hz": round(f_lo, 1),
                "f_hi_hz": round(f_hi, 1),
                "lag_s": round(lag_n / SR, 6),
            })
        _write_stereo(os.path.join(audio_dir, wav_name), ch0, ch1)
        log_rows.append({
            "file": wav_name,
            "recorder_id": file_id,
            "start_time_utc": start_utc,
            "duration_s": duration_s,
            "n_channels": 2,
        })

    n_call_events = classes * per_class
    if n_call_events % EVENTS_PER_FILE:
        raise DataError(
            f"classes*per_class must be divisible by {EVENTS_PER_FILE}")
    file_idx = 0
    for start in range(0, n_call_events, EVENTS_PER_FILE):
        rng = _derive_rng(seed, 0, file_idx)
        events = []
        for j in range(start, start + EVENTS_PER_FILE):
            spec = specs[j % classes]  # rotate classes across slots
            event, f_lo, f_hi = render_call(spec, rng)
            events.append((event, spec.class_id, f_lo, f_hi))
        emit_file(f"call_{file_idx:04d}", file_idx, events, rng)
        file_idx += 1
    if n_confusers % EVENTS_PER_FILE:
        raise DataError(f"n_confusers must be divisible by {EVENTS_PER_FILE}")
    for start in range(0, n_confusers, EVENTS_PER_FILE):
        rng = _derive_rng(seed, 1, file_idx)
        events = []
        for _ in range(EVENTS_PER_FILE):
            event, f_lo, f_hi = render_confuser(rng)
            events.append((event, "SINK", f_lo, f_hi))
        emit_file(f"conf_{file_idx:04d}", file_idx, events, rng)
        file_idx += 1

    with open(os.path.join(out_dir, "truth.jsonl"), "w") as f:
        for row in truth_rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "recording_log.jsonl"), "w") as f:
        for row in log_rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    summary = {
        "classes": classes, "per_class": per_class, "seed": seed,
        "n_confusers": n_confusers, "duration_s": duration_s,
        "noise_sd": noise_sd, "n_files": file_idx,
        "n_call_events": n_call_events,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
    return summary


def load_truth(path: str) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def load_recording_log(path: str) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def assign_truth_labels(tfrs, truth_rows: list[dict],
                        time_tol_s: float = 0.1) -> dict[str, str]:
    """Match extracted TFRs back to ground-truth events.

    A TFR matches an event when it comes from the same recorder, its
    time span overlaps the event span (within tolerance), and its
    frequency band overlaps the event band. Returns tfr_id -> class_id
    for matched TFRs only.
    """
    by_recorder: dict[str, list[dict]] = {}
    for row in truth_rows:
        by_recorder.setdefault(row["recorder_id"], []).append(row)
    out: dict[str, str] = {}
    for tfr in tfrs:
        prov = tfr.provenance
        rows = by_recorder.get(prov.recorder_id, [])
        t0, t1 = prov.start_time, tfr.end_time
        f_lo, f_hi = tfr.freq_range_hz()
        best, best_ov = None, 0.0
        for row in rows:
            ov = min(t1, row["t_off"] + time_tol_s) - max(
                t0, row["t_on"] - time_tol_s)
            if ov <= 0:
                continue
            if f_hi < row["f_lo_hz"] - 200.0 or f_lo > row["f_hi_hz"] + 200.0:
                continue
            if ov > best_ov:
                best, best_ov = row, ov
        if best is not None:
            out[tfr.id] = best["class_id"]
    return out
