"""Deployment pipeline: run the trained stack over continuous recordings,
apply the three drop rules, and aggregate survivors into hourly rates.

Drop rules are checked in a fixed order and each TFR is counted against
the first rule it trips, so the counts reconcile exactly:
extracted == bird_pass + confidence + sink + excluded + detections.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .audio import load_wav
from .errors import DataError
from .frontend import FrontendConfig, Provenance, extract_from_audio, to_fixed
from .models.autoencoder import AeModel, encode_batch
from .models.birdpass import BirdPassModel, bird_pass_scores
from .models.classifier import ClassifierModel, classify_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    tfr_id: str
    class_id: str
    confidence: float
    bird_pass_score: float
    provenance: Provenance

    def to_dict(self) -> dict:
        return {"tfr_id": self.tfr_id, "class_id": self.class_id,
                "confidence": round(self.confidence, 6),
                "bird_pass_score": round(self.bird_pass_score, 6),
                "provenance": self.provenance.to_dict()}


@dataclass(frozen=True)
class DetectorConfig:
    bird_pass_threshold: float = 0.5
    confidence_threshold: float = 0.7
    excluded_class_ids: tuple = ()
    seed: int = 0  # pad placement when fixing TFR widths


@dataclass
class DetectorResult:
    detections: list[Detection] = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def reconciles(self) -> bool:
        c = self.counts
        dropped = (c["dropped_bird_pass"] + c["dropped_confidence"]
                   + c["dropped_sink"] + c["dropped_excluded"])
        return c["extracted"] == dropped + len(self.detections)


def fix_seed_for(base_seed: int, tfr_id: str) -> int:
    # content-addressed ids make pad placement reproducible per TFR
    ss = np.random.SeedSequence(entropy=(base_seed, int(tfr_id, 16)))
    return int(ss.generate_state(1)[0])


def apply_drop_rules(tfrs, bp_scores: np.ndarray, probs: np.ndarray,
                     class_ids: Sequence[str], sink_class_id: str,
                     cfg: DetectorConfig = DetectorConfig()) -> DetectorResult:
    """Pure filtering core. `probs` is (n, n_classes) aligned with
    `class_ids`; each TFR counts against the first rule it trips."""
    result = DetectorResult(counts={
        "extracted": len(tfrs), "dropped_bird_pass": 0,
        "dropped_confidence": 0, "dropped_sink": 0, "dropped_excluded": 0,
        "files_failed": 0,
    })
    excluded = set(cfg.excluded_class_ids)
    for tfr, score, p in zip(tfrs, np.atleast_1d(bp_scores),
                             np.atleast_2d(probs)):
        top = int(np.argmax(p))
        top_class = class_ids[top]
        confidence = float(p[top])
        if score < cfg.bird_pass_threshold:
            result.counts["dropped_bird_pass"] += 1
        elif confidence < cfg.confidence_threshold:
            result.counts["dropped_confidence"] += 1
        elif top_class == sink_class_id:
            result.counts["dropped_sink"] += 1
        elif top_class in excluded:
            result.counts["dropped_excluded"] += 1
        else:
            result.detections.append(Detection(
                tfr_id=tfr.id, class_id=top_class, confidence=confidence,
                bird_pass_score=float(score), provenance=tfr.provenance))
    return result


def filter_tfrs(tfrs, ae: AeModel, bird_pass: BirdPassModel,
                classifier: ClassifierModel,
                cfg: DetectorConfig = DetectorConfig()) -> DetectorResult:
    """Score already-extracted TFRs and apply the drop rules."""
    if not tfrs:
        return apply_drop_rules([], np.empty(0), np.empty((0, 1)),
                                classifier.class_ids,
                                classifier.taxonomy.sink_class_id, cfg)
    fixed = [to_fixed(t, fix_seed_for(cfg.seed, t.id)) for t in tfrs]
    latents = encode_batch(fixed, ae)
    bp = bird_pass_scores(latents, bird_pass)
    probs = classify_batch(fixed, classifier)
    return apply_drop_rules(tfrs, bp, probs, classifier.class_ids,
                            classifier.taxonomy.sink_class_id, cfg)


def run_detector(sources: Sequence[Mapping], ae: AeModel,
                 bird_pass: BirdPassModel, classifier: ClassifierModel,
                 cfg: DetectorConfig = DetectorConfig(),
                 frontend_cfg: FrontendConfig | None = None) -> DetectorResult:
    """Full chain over audio files.

    `sources` rows need "path", "recorder_id", "start_time_utc".
    Unreadable files are skipped with a warning and counted.
    """
    tfrs = []
    n_failed = 0
    for row in sources:
        try:
            segments = load_wav(row["path"], recorder_id=row["recorder_id"],
                                start_time_utc=float(row["start_time_utc"]))
        except Exception as exc:
            log.warning("skipping unreadable audio %s: %s", row["path"], exc)
            n_failed += 1
            continue
        for seg in segments:
            tfrs.extend(extract_from_audio(seg, frontend_cfg))
    result = filter_tfrs(tfrs, ae, bird_pass, classifier, cfg)
    result.counts["files_failed"] = n_failed
    return result


# -- aggregation ------------------------------------------------------------


@dataclass
class HourlyRates:
    """Detections per microphone-hour, by class and hour of day (UTC)."""

    rates: dict            # class_id -> {hour: rate}
    counts: dict           # class_id -> {hour: n_detections}
    mic_hours: dict        # hour -> microphone-hours of coverage

    @property
    def total_mic_hours(self) -> float:
        return float(sum(self.mic_hours.values()))


def _hour_of_day(t_utc: float) -> int:
    return int((t_utc % 86400.0) // 3600.0)


def aggregate_hourly(detections: Sequence[Detection],
                     recording_log: Sequence[Mapping],
                     class_ids: Sequence[str] | None = None) -> HourlyRates:
    """rate = detections / mic-hours per hour of day.

    A recording with n channels contributes n microphone-hours per hour
    of wall clock covered. Raises DataError for a detection outside the
    logged coverage.
    """
    mic_hours: dict[int, float] = {}
    spans = []
    for row in recording_log:
        t0 = float(row["start_time_utc"])
        t1 = t0 + float(row["duration_s"])
        n_ch = int(row.get("n_channels", 1))
        spans.append((t0, t1))
        t = t0
        while t < t1:
            edge = (t // 3600.0 + 1) * 3600.0  # next hour boundary
            seg_end = min(edge, t1)
            h = _hour_of_day(t)
            mic_hours[h] = mic_hours.get(h, 0.0) + n_ch * (seg_end - t) / 3600.0
            t = seg_end

    counts: dict[str, dict[int, int]] = {}
    for det in detections:
        t = det.provenance.start_time
        if not any(t0 <= t < t1 for t0, t1 in spans):
            raise DataError(
                f"detection {det.tfr_id} at {t} outside logged coverage")
        by_hour = counts.setdefault(det.class_id, {})
        h = _hour_of_day(t)
        by_hour[h] = by_hour.get(h, 0) + 1

    all_classes = sorted(set(counts) | set(class_ids or []))
    rates: dict[str, dict[int, float]] = {}
    for cid in all_classes:
        rates[cid] = {}
        counts.setdefault(cid, {})
        for h, mh in sorted(mic_hours.items()):
            n = counts[cid].get(h, 0)
            rates[cid][h] = n / mh if mh > 0 else 0.0
    return HourlyRates(rates=rates, counts=counts, mic_hours=mic_hours)


def sample_for_review(detections: Sequence[Detection], per_class_cap: int = 50,
                      seed: int = 0) -> list[Detection]:
    """Uniform without-replacement sample per class, capped and seeded."""
    if per_class_cap < 1:
        raise DataError("per_class_cap must be >= 1")
    by_class: dict[str, list[Detection]] = {}
    for det in detections:
        by_class.setdefault(det.class_id, []).append(det)
    rng = np.random.default_rng(seed)
    out: list[Detection] = []
    for cid in sorted(by_class):
        members = sorted(by_class[cid], key=lambda d: d.tfr_id)
        if len(members) > per_class_cap:
            idx = rng.choice(len(members), size=per_class_cap, replace=False)
            members = [members[i] for i in sorted(idx)]
        out.extend(members)
    return out


# -- exports ----------------------------------------------------------------


def detections_to_jsonl(detections: Sequence[Detection], path: str) -> None:
    with open(path, "w") as f:
        for det in detections:
            f.write(json.dumps(det.to_dict(), sort_keys=True) + "\n")


def detections_from_jsonl(path: str) -> list[Detection]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(Detection(
                tfr_id=d["tfr_id"], class_id=d["class_id"],
                confidence=d["confidence"],
                bird_pass_score=d["bird_pass_score"],
                provenance=Provenance.from_dict(d["provenance"])))
    return out


def detections_to_csv(detections: Sequence[Detection], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tfr_id", "class_id", "confidence", "bird_pass_score",
                    "source", "channel_id", "start_time_utc"])
        for det in detections:
            w.writerow([det.tfr_id, det.class_id,
                        round(det.confidence, 6), round(det.bird_pass_score, 6),
                        det.provenance.source, det.provenance.channel_id,
                        det.provenance.start_time])


def hourly_rates_to_csv(rates: HourlyRates, path: str) -> None:
    hours = sorted(rates.mic_hours)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class_id"] + [f"h{h:02d}" for h in hours])
        w.writerow(["mic_hours"] + [round(rates.mic_hours[h], 4) for h in hours])
        for cid in sorted(rates.rates):
            w.writerow([cid] + [round(rates.rates[cid].get(h, 0.0), 6)
                                for h in hours])


def hourly_rates_to_png(rates: HourlyRates, out_dir: str) -> list[str]:
    """One bar chart per class: rate vs hour of day."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    hours = sorted(rates.mic_hours)
    for cid in sorted(rates.rates):
        fig, ax = plt.subplots(figsize=(8, 3))
        ax.bar(hours, [rates.rates[cid].get(h, 0.0) for h in hours],
               color="#336699")
        ax.set_xlabel("hour of day (UTC)")
        ax.set_ylabel("detections / mic-hour")
        ax.set_title(cid)
        ax.set_xticks(range(0, 24, 2))
        fig.tight_layout()
        path = os.path.join(out_dir, f"rate_{cid}.png")
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
