"""TFR augmentation: small frequency shifts, time stretching, and noise.

Used to top up under-represented classes to the balanced per-class
target and to oversample non-bird examples for the bird-pass filter.
Every augmentation is deterministic given its seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import DataError
from .frontend import FIXED_WIDTH, TFR, FixedTFR, to_fixed
from .store import LabeledSample

TfrLike = Union[TFR, FixedTFR]


@dataclass
class AugmentConfig:
    max_freq_shift_rows: int = 4
    time_stretch_range: tuple[float, float] = (0.9, 1.1)
    noise_sd_range: tuple[float, float] = (0.01, 0.05)
    white_noise_max: float = 0.0


def shift_rows(values: np.ndarray, k: int) -> np.ndarray:
    """Shift toward higher rows by k (negative = down), zero-filling."""
    out = np.zeros_like(values)
    if k == 0:
        out[:] = values
    elif k > 0:
        out[k:] = values[:-k]
    else:
        out[:k] = values[-k:]
    return out


def stretch_columns(values: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbor column resampling to round(w * factor) columns."""
    if factor <= 0:
        raise DataError("stretch factor must be positive")
    w = values.shape[1]
    new_w = max(1, int(round(w * factor)))
    src = np.minimum(np.round(np.arange(new_w) / factor).astype(np.int64), w - 1)
    return values[:, src]


def augment(tfr: FixedTFR, cfg: AugmentConfig, seed: int) -> FixedTFR:
    rng = np.random.default_rng(seed)
    m = int(cfg.max_freq_shift_rows)
    shift = int(rng.integers(-m, m + 1)) if m > 0 else 0
    factor = float(rng.uniform(*cfg.time_stretch_range))
    sd = float(rng.uniform(*cfg.noise_sd_range))

    vals = shift_rows(tfr.values, shift)
    vals = stretch_columns(vals, factor)
    # stretching changes the width; re-fix to 256 with random placement
    w = vals.shape[1]
    if w > FIXED_WIDTH:
        start = int(rng.integers(0, w - FIXED_WIDTH + 1))
        vals = vals[:, start : start + FIXED_WIDTH]
    elif w < FIXED_WIDTH:
        left = int(rng.integers(0, FIXED_WIDTH - w + 1))
        padded = np.zeros((vals.shape[0], FIXED_WIDTH), dtype=vals.dtype)
        padded[:, left : left + w] = vals
        vals = padded

    noisy = vals.astype(np.float64) + rng.normal(0.0, sd, size=vals.shape)
    if cfg.white_noise_max > 0:
        noisy += rng.uniform(0.0, cfg.white_noise_max)
    out = np.clip(noisy, 0.0, 1.0).astype(np.float32)
    return FixedTFR(values=out, pad_offset=tfr.pad_offset,
                    tfr_id=tfr.tfr_id, provenance=tfr.provenance)


def _as_fixed(t: TfrLike, seed: int) -> FixedTFR:
    return t if isinstance(t, FixedTFR) else to_fixed(t, rng_seed=seed)


def _seed_for(base: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=base,
                                      spawn_key=tuple(key)).generate_state(1)[0])


def balance_classes(samples: Sequence[LabeledSample],
                    tfrs: Mapping[str, TfrLike],
                    target_per_class: int = 50,
                    seed: int = 0,
                    cfg: AugmentConfig | None = None,
                    ) -> tuple[list[LabeledSample], dict[str, FixedTFR]]:
    """Exactly target_per_class train samples per class: subsample the
    over-represented, augment the rest up. Val/test pass through
    untouched; augmented samples land only in train. Returns the new
    sample list plus the generated FixedTFRs keyed by their new ids.
    """
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[LabeledSample]] = {}
    passthrough = []
    for s in samples:
        if s.split == "train":
            by_class.setdefault(s.class_id, []).append(s)
        else:
            passthrough.append(s)

    out = list(passthrough)
    new_tfrs: dict[str, FixedTFR] = {}
    for ci, class_id in enumerate(sorted(by_class)):
        originals = sorted(by_class[class_id], key=lambda s: s.tfr_id)
        if not originals:
            raise DataError(f"class {class_id!r} has no train samples")
        if len(originals) >= target_per_class:
            keep = rng.choice(len(originals), size=target_per_class, replace=False)
            out.extend(originals[i] for i in sorted(keep))
            continue
        out.extend(originals)
        deficit = target_per_class - len(originals)
        for i in range(deficit):
            src = originals[i % len(originals)]
            if src.tfr_id not in tfrs:
                raise DataError(f"no TFR values for sample {src.tfr_id!r}")
            s_aug = _seed_for(seed, ci, i)
            fixed = _as_fixed(tfrs[src.tfr_id], s_aug)
            aug = augment(fixed, cfg, seed=_seed_for(seed, ci, i, 1))
            new_id = f"{src.tfr_id}-aug{i:03d}"
            new_tfrs[new_id] = FixedTFR(values=aug.values, pad_offset=aug.pad_offset,
                                        tfr_id=new_id, provenance=fixed.provenance)
            out.append(LabeledSample(tfr_id=new_id, class_id=class_id,
                                     split="train", augmented_from=src.tfr_id))
    return out, new_tfrs


def oversample_with_freq_shifts(tfrs: Sequence[TfrLike], target: int,
                                max_shift_rows: int = 4,
                                seed: int = 0) -> list[FixedTFR]:
    """Grow a TFR collection to `target` items by adding randomly
    frequency-shifted copies (used for the non-bird class)."""
    if not tfrs:
        raise DataError("cannot oversample an empty collection")
    base = [_as_fixed(t, _seed_for(seed, i)) for i, t in enumerate(tfrs)]
    out = list(base)
    rng = np.random.default_rng(seed)
    i = 0
    while len(out) < target:
        src = base[i % len(base)]
        k = int(rng.integers(-max_shift_rows, max_shift_rows + 1))
        out.append(FixedTFR(values=shift_rows(src.values, k),
                            pad_offset=src.pad_offset,
                            tfr_id=f"{src.tfr_id}-fs{i:04d}",
                            provenance=src.provenance))
        i += 1
    return out
