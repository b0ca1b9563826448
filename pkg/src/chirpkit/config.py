"""Declarative TOML configuration for the CLI, validated against a
published schema before any run. Unknown keys are rejected with the
offending path; flags override file values at the CLI layer."""

from __future__ import annotations

import hashlib
import json
import platform

import jsonschema

try:
    import tomllib as _toml
except ModuleNotFoundError:
    import tomli as _toml

from .errors import ConfigError

SCHEMA_VERSION = 1


def _num(minimum=None, exclusive_min=None, maximum=None):
    out = {"type": "number"}
    if minimum is not None:
        out["minimum"] = minimum
    if exclusive_min is not None:
        out["exclusiveMinimum"] = exclusive_min
    if maximum is not None:
        out["maximum"] = maximum
    return out


def _int(minimum=None):
    out = {"type": "integer"}
    if minimum is not None:
        out["minimum"] = minimum
    return out


def _int_array():
    return {"type": "array", "items": {"type": "integer", "minimum": 1},
            "minItems": 1}


def _obj(props):
    return {"type": "object", "additionalProperties": False,
            "properties": props}


_ADAM = {"lr": _num(exclusive_min=0), "beta1": _num(0, None, 1),
         "beta2": _num(0, None, 1)}

SCHEMA = _obj({
    "schema_version": {"type": "integer", "enum": [SCHEMA_VERSION]},
    "frontend": _obj({
        "sigma_floor_db": _num(minimum=0),
        "blank_mean_thresh": _num(),
        "blank_var_thresh": _num(),
        "dilation_freq": _int(1),
        "dilation_time": _int(1),
        "marker_h": _num(exclusive_min=0),
        "min_duration_bins": _int(1),
        "min_tb_product": _int(1),
        "block_s": _num(exclusive_min=0),
    }),
    "pairs": _obj({
        "max_lag_s": _num(exclusive_min=0),
        "xcorr_threshold": _num(0, None, 1),
        "sync_tolerance_s": _num(minimum=0),
        "min_band_hz": _num(exclusive_min=0),
    }),
    "train_ae": _obj({
        "seed": _int(0), "epochs": _int(1), "batch_size": _int(1),
        "latent_dim": _int(1), "channels": _int_array(), **_ADAM,
    }),
    "train_embed": _obj({
        "seed": _int(0), "epochs": _int(1), "beta": _num(exclusive_min=0),
        "batch_pairs": _int(2), "latent_dim": _int(1),
        "hidden_dim": _int(1), "embed_dim": _int(1), **_ADAM,
    }),
    "train_birdpass": _obj({
        "seed": _int(0), "epochs": _int(1), "batch_size": _int(1),
        "nonbird_weight": _num(exclusive_min=0), "latent_dim": _int(1),
        "widths": _int_array(), "threshold": _num(0, None, 1),
        "val_fraction": _num(0, None, 0.5), **_ADAM,
    }),
    "train_clf": _obj({
        "seed": _int(0), "sets": _int(1), "ce_epochs_per_set": _int(1),
        "contrastive_epochs_per_set": _int(0), "batch_size": _int(1),
        "beta": _num(exclusive_min=0), "batch_pairs": _int(2),
        "sink_multiple": _num(exclusive_min=0),
        "head_widths": _int_array(), "per_class": _int(1), **_ADAM,
    }),
    "detect": _obj({
        "bird_pass_threshold": _num(0, None, 1),
        "confidence_threshold": _num(0, None, 1),
        "excluded_class_ids": {"type": "array", "items": {"type": "string"}},
        "seed": _int(0),
    }),
    "cluster": _obj({
        "threshold": _num(0, None, 1),
        "seed": _int(0),
    }),
    "serve": _obj({
        "host": {"type": "string"},
        "port": _int(1),
    }),
    "xenocanto": _obj({
        "api_base": {"type": "string"},
        "rate_limit_s": _num(minimum=0),
        "max_retries": _int(0),
    }),
    "synth": _obj({
        "classes": _int(1), "per_class": _int(1), "seed": _int(0),
        "n_confusers": _int(0), "duration_s": _num(exclusive_min=0),
        "noise_sd": _num(exclusive_min=0),
    }),
})


def validate_config(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: e.json_path)
    if errors:
        e = errors[0]
        raise ConfigError(f"config {e.json_path}: {e.message}")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            cfg = _toml.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}")
    validate_config(cfg)
    return cfg


def config_keys() -> list[str]:
    """Every accepted config key as section.key, for --help."""
    keys = []
    for section, sub in SCHEMA["properties"].items():
        if sub.get("type") == "object":
            keys.extend(f"{section}.{k}" for k in sub["properties"])
        else:
            keys.append(section)
    return keys


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def tool_versions() -> dict:
    import numpy
    import scipy
    import torch

    try:
        from importlib.metadata import version
        own = version("chirpkit")
    except Exception:
        own = "unknown"
    return {"chirpkit": own, "numpy": numpy.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__,
            "python": platform.python_version()}


def run_manifest(command: str, cfg: dict, seeds: dict,
                 input_digests: dict) -> dict:
    """Reproducibility record: no timestamps, no absolute paths, so two
    identical runs write byte-identical manifests."""
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": config_hash(cfg),
        "seeds": {k: int(v) for k, v in sorted(seeds.items())},
        "inputs": dict(sorted(input_digests.items())),
        "versions": tool_versions(),
    }


def write_run_manifest(path: str, manifest: dict) -> None:
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
