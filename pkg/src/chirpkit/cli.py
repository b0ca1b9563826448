"""Single entry point: every pipeline stage as a subcommand.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training divergence,
5 I/O. Logs go to stderr as JSON Lines; each command prints one JSON
result object on stdout. Every artifact-producing run writes a run
manifest (config hash, seeds, input digests, versions) next to its
output.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys

from .config import (SCHEMA_VERSION, config_keys, file_digest, load_config,
                     run_manifest, write_run_manifest)
from .errors import (ChirpkitError, ConfigError, DataError, RemoteApiError,
                     TrainingDivergedError)

log = logging.getLogger("chirpkit.cli")


class _JsonLinesHandler(logging.Handler):
    def emit(self, record):
        try:
            payload = {"ts": round(record.created, 3),
                       "level": record.levelname.lower(),
                       "logger": record.name, "msg": record.getMessage()}
            sys.stderr.write(json.dumps(payload) + "\n")
            sys.stderr.flush()
        except Exception:
            self.handleError(record)


def _setup_logging(level: str) -> None:
    root = logging.getLogger()
    root.handlers = [_JsonLinesHandler()]
    root.setLevel(getattr(logging, level.upper(), logging.INFO))


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _pick(flag_val, sec: dict, key: str, default):
    return flag_val if flag_val is not None else sec.get(key, default)


def _cfg_kwargs(sec: dict, keys, tuples=()) -> dict:
    out = {k: sec[k] for k in keys if k in sec}
    for k in tuples:
        if k in out:
            out[k] = tuple(out[k])
    return out


def _require_seed(args, sec: dict, command: str) -> int:
    seed = args.seed if args.seed is not None else sec.get("seed")
    if seed is None:
        raise ConfigError(f"{command}: seed is required "
                          f"(--seed flag or config [{args.section}].seed)")
    return int(seed)


def _ids_digest(ids) -> str:
    h = hashlib.sha256()
    for i in sorted(ids):
        h.update(str(i).encode())
        h.update(b"\n")
    return h.hexdigest()[:16]


def _read_jsonl(path: str) -> list[dict]:
    try:
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]
    except FileNotFoundError:
        raise DataError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON Lines: {exc}")


def _apply_threading(args) -> int:
    import torch

    n = 1 if args.deterministic else (args.workers or os.cpu_count() or 1)
    torch.set_num_threads(n)
    return n


def _corpus_rows(in_dir: str) -> list[dict]:
    """Recording-log rows; falls back to a flat directory of WAVs."""
    log_path = os.path.join(in_dir, "recording_log.jsonl")
    if os.path.exists(log_path):
        from .synth import load_recording_log

        return load_recording_log(log_path)
    wavs = sorted(glob.glob(os.path.join(in_dir, "*.wav")))
    if not wavs:
        raise DataError(f"no recording_log.jsonl and no .wav files in {in_dir}")
    return [{"file": os.path.basename(w),
             "recorder_id": os.path.splitext(os.path.basename(w))[0],
             "start_time_utc": 0.0} for w in wavs]


def _audio_path(in_dir: str, fname: str) -> str:
    p = os.path.join(in_dir, "audio", fname)
    return p if os.path.exists(p) else os.path.join(in_dir, fname)


# -- subcommands --------------------------------------------------------------


def _cmd_synth(args, cfg) -> int:
    from .synth import synth_corpus

    sec = cfg.get("synth", {})
    seed = int(_pick(args.seed, sec, "seed", 7))
    params = {
        "classes": int(_pick(args.classes, sec, "classes", 8)),
        "per_class": int(_pick(args.per_class, sec, "per_class", 30)),
        "n_confusers": int(_pick(args.confusers, sec, "n_confusers", 60)),
        "duration_s": float(_pick(args.duration_s, sec, "duration_s", 8.0)),
        "noise_sd": float(_pick(args.noise_sd, sec, "noise_sd", 0.008)),
    }
    summary = synth_corpus(args.out, seed=seed, **params)
    write_run_manifest(os.path.join(args.out, "run-synth.json"),
                       run_manifest("synth", cfg, {"seed": seed}, {}))
    _emit(summary)
    return 0


def _cmd_extract(args, cfg) -> int:
    from .audio import load_wav
    from .frontend import FrontendConfig, extract_from_audio
    from .store import DatasetStore

    fe = FrontendConfig(**_cfg_kwargs(cfg.get("frontend", {}),
                                      FrontendConfig.__dataclass_fields__))
    store = DatasetStore(args.out)
    rows = _corpus_rows(args.in_dir)
    inputs = {}
    all_tfrs = []
    for row in rows:
        path = _audio_path(args.in_dir, row["file"])
        inputs[row["file"]] = file_digest(path)
        segments = load_wav(path, recorder_id=row["recorder_id"],
                            start_time_utc=float(row["start_time_utc"]))
        store.register_audio(row["file"], path,
                             start_time_utc=float(row["start_time_utc"]))
        for seg in segments:
            tfrs = extract_from_audio(seg, fe, source=row["file"])
            for t in tfrs:
                store.put_tfr(t)
            all_tfrs.extend(tfrs)
        log.info("extracted %s: %d TFRs so far", row["file"], len(all_tfrs))
    n_labeled = 0
    if args.truth:
        from .synth import assign_truth_labels, load_truth

        labels = assign_truth_labels(all_tfrs, load_truth(args.truth))
        for tid, cid in sorted(labels.items()):
            store.assign_label(tid, cid, author="truth")
        n_labeled = len(labels)
        inputs["truth.jsonl"] = file_digest(args.truth)
    write_run_manifest(os.path.join(args.out, "manifests", "run-extract.json"),
                       run_manifest("extract", cfg, {}, inputs))
    _emit({"n_files": len(rows), "n_tfrs": len(all_tfrs),
           "n_labeled": n_labeled})
    return 0


def _cmd_mine_pairs(args, cfg) -> int:
    from .audio import load_wav
    from .pairs import PairMinerConfig, mine_pairs
    from .store import DatasetStore

    pcfg = PairMinerConfig(**_cfg_kwargs(cfg.get("pairs", {}),
                                         PairMinerConfig.__dataclass_fields__))
    store = DatasetStore(args.store)
    tfrs = store.load_all_tfrs()
    by_source: dict[str, list] = {}
    for t in tfrs.values():
        by_source.setdefault(t.provenance.source, []).append(t)

    all_pairs = []
    for source in sorted(by_source):
        entry = store.audio_entry_for(source)
        if entry is None:
            raise DataError(f"audio for source {source!r} is not registered")
        path, start = entry
        rec = by_source[source][0].provenance.recorder_id
        segments = load_wav(path, recorder_id=rec, start_time_utc=start)
        if len(segments) < 2:
            log.warning("source %s has one channel, no pairs", source)
            continue
        by_ch: dict[str, list] = {}
        for t in by_source[source]:
            by_ch.setdefault(t.provenance.channel_id, []).append(t)
        a, b = segments[0], segments[1]
        all_pairs.extend(mine_pairs(by_ch.get(a.channel_id, []),
                                    by_ch.get(b.channel_id, []), a, b, pcfg))
    n = store.write_pairs(all_pairs)
    write_run_manifest(
        os.path.join(args.store, "manifests", "run-mine-pairs.json"),
        run_manifest("mine-pairs", cfg, {}, {"tfr_ids": _ids_digest(tfrs)}))
    _emit({"n_pairs": n, "n_sources": len(by_source)})
    return 0


def _cmd_train_ae(args, cfg) -> int:
    from .models.autoencoder import AeTrainConfig, save_autoencoder, train_autoencoder
    from .store import DatasetStore

    sec = cfg.get("train_ae", {})
    seed = _require_seed(args, sec, "train-ae")
    kw = _cfg_kwargs(sec, ("epochs", "batch_size", "lr", "beta1", "beta2",
                           "latent_dim", "channels"), tuples=("channels",))
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    if args.batch_size is not None:
        kw["batch_size"] = args.batch_size
    store = DatasetStore(args.store)
    tfrs = store.load_all_tfrs()
    if not tfrs:
        raise DataError("store has no TFRs")
    dataset = [tfrs[i] for i in sorted(tfrs)]
    model = train_autoencoder(dataset, AeTrainConfig(seed=seed, **kw))
    save_autoencoder(model, args.out)
    write_run_manifest(args.out + ".run.json",
                       run_manifest("train-ae", cfg, {"seed": seed},
                                    {"tfr_ids": _ids_digest(tfrs)}))
    val_mse = model.metadata.get("loss_history", {}).get("val_mse", [])
    _emit({"n_tfrs": len(dataset), "out": args.out,
           "final_val_mse": val_mse[-1] if val_mse else None})
    return 0


def _resolve_pairs(store, tfrs) -> list[tuple]:
    rows = store.read_pairs()
    if not rows:
        raise DataError("store has no mined pairs; run mine-pairs first")
    out = []
    for r in rows:
        try:
            out.append((tfrs[r["tfr_a_id"]], tfrs[r["tfr_b_id"]]))
        except KeyError as exc:
            raise DataError(f"pair references unknown TFR {exc}")
    return out


def _cmd_train_embed(args, cfg) -> int:
    from .models.autoencoder import load_autoencoder
    from .models.embedder import ContrastiveConfig, save_embedder, train_embedder
    from .store import DatasetStore

    sec = cfg.get("train_embed", {})
    seed = _require_seed(args, sec, "train-embed")
    kw = _cfg_kwargs(sec, ("epochs", "beta", "batch_pairs", "lr", "beta1",
                           "beta2", "latent_dim", "hidden_dim", "embed_dim"))
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    store = DatasetStore(args.store)
    tfrs = store.load_all_tfrs()
    pairs = _resolve_pairs(store, tfrs)
    ae = load_autoencoder(args.ae)
    model = train_embedder(pairs, ae, ContrastiveConfig(seed=seed, **kw))
    save_embedder(model, args.out)
    write_run_manifest(args.out + ".run.json",
                       run_manifest("train-embed", cfg, {"seed": seed},
                                    {"tfr_ids": _ids_digest(tfrs),
                                     "ae": file_digest(args.ae)}))
    _emit({"n_pairs": len(pairs), "out": args.out})
    return 0


def _cmd_train_birdpass(args, cfg) -> int:
    from .detect import fix_seed_for
    from .frontend import to_fixed
    from .models.autoencoder import encode_batch, load_autoencoder
    from .models.birdpass import BirdPassConfig, save_bird_pass, train_bird_pass
    from .store import DatasetStore

    sec = cfg.get("train_birdpass", {})
    seed = _require_seed(args, sec, "train-birdpass")
    kw = _cfg_kwargs(sec, ("epochs", "batch_size", "nonbird_weight", "lr",
                           "beta1", "beta2", "latent_dim", "widths",
                           "threshold", "val_fraction"), tuples=("widths",))
    store = DatasetStore(args.store)
    state = store.replay()
    tfrs = store.load_all_tfrs()
    bird_ids = sorted(t for t, c in state.labels.items() if c != args.sink_class)
    nonbird_ids = sorted(t for t, c in state.labels.items() if c == args.sink_class)
    if not bird_ids or not nonbird_ids:
        raise DataError("need labels on both bird TFRs and sink TFRs "
                        f"(sink class {args.sink_class!r})")
    ae = load_autoencoder(args.ae)

    def latents(ids):
        fixed = [to_fixed(tfrs[i], fix_seed_for(seed, i)) for i in ids]
        return encode_batch(fixed, ae)

    model = train_bird_pass(latents(bird_ids), latents(nonbird_ids),
                            BirdPassConfig(seed=seed, **kw))
    save_bird_pass(model, args.out)
    write_run_manifest(args.out + ".run.json",
                       run_manifest("train-birdpass", cfg, {"seed": seed},
                                    {"tfr_ids": _ids_digest(tfrs),
                                     "ae": file_digest(args.ae)}))
    _emit({"n_bird": len(bird_ids), "n_nonbird": len(nonbird_ids),
           "out": args.out, "val_f05": model.metadata.get("val_f05_bird")})
    return 0


def _cmd_train_clf(args, cfg) -> int:
    import numpy as np

    from .augment import balance_classes
    from .detect import fix_seed_for
    from .frontend import to_fixed
    from .models.autoencoder import load_autoencoder
    from .models.classifier import (ClassifierTrainConfig, ClassTaxonomy,
                                    classify_batch, save_classifier,
                                    train_classifier)
    from .models.embedder import load_embedder
    from .store import DatasetStore, split_dataset

    sec = cfg.get("train_clf", {})
    seed = _require_seed(args, sec, "train-clf")
    kw = _cfg_kwargs(sec, ("sets", "ce_epochs_per_set",
                           "contrastive_epochs_per_set", "batch_size", "lr",
                           "beta1", "beta2", "beta", "batch_pairs",
                           "sink_multiple", "head_widths"),
                     tuples=("head_widths",))
    if args.sets is not None:
        kw["sets"] = args.sets
    per_class = int(_pick(args.per_class, sec, "per_class", 10))

    taxonomy = ClassTaxonomy.from_json_file(args.taxonomy)
    store = DatasetStore(args.store)
    state = store.replay()
    tfr_map = store.load_all_tfrs()
    sink_id = taxonomy.sink_class_id
    labeled = state.labeled_samples()
    bird = [s for s in labeled if s.class_id != sink_id]
    sink_tfrs = [tfr_map[s.tfr_id] for s in labeled if s.class_id == sink_id]
    if not state.splits:
        groups = {s.tfr_id: tfr_map[s.tfr_id].provenance.source for s in bird}
        bird, report = split_dataset(bird, seed=seed, groups=groups)
        if report["dropped_classes"]:
            log.warning("dropped classes with <3 units: %s",
                        report["dropped_classes"])
    test = [s for s in bird if s.split == "test"]
    balanced, new_tfrs = balance_classes(
        [s for s in bird if s.split != "test"], tfr_map,
        target_per_class=per_class, seed=seed)
    full_map = dict(tfr_map)
    full_map.update(new_tfrs)
    ae = load_autoencoder(args.ae)
    embedder = load_embedder(args.embedder)
    pairs = _resolve_pairs(store, tfr_map)
    model = train_classifier(balanced, taxonomy, sink_tfrs, ae, embedder,
                             pairs, full_map,
                             ClassifierTrainConfig(seed=seed, **kw))
    save_classifier(model, args.out)

    result = {"n_train": sum(1 for s in balanced if s.split == "train"),
              "n_val": sum(1 for s in balanced if s.split == "val"),
              "n_test": len(test), "out": args.out}
    if test:
        fixed = [to_fixed(tfr_map[s.tfr_id], fix_seed_for(seed, s.tfr_id))
                 for s in test]
        probs = classify_batch(fixed, model)
        pred = [model.class_ids[i] for i in np.argmax(probs, axis=1)]
        truth = [s.class_id for s in test]
        result["test_accuracy"] = float(np.mean([p == t for p, t
                                                 in zip(pred, truth)]))
    write_run_manifest(args.out + ".run.json",
                       run_manifest("train-clf", cfg, {"seed": seed},
                                    {"tfr_ids": _ids_digest(tfr_map),
                                     "ae": file_digest(args.ae),
                                     "embedder": file_digest(args.embedder),
                                     "taxonomy": file_digest(args.taxonomy)}))
    _emit(result)
    return 0


def _cmd_detect(args, cfg) -> int:
    from .detect import (DetectorConfig, aggregate_hourly, detections_to_csv,
                         detections_to_jsonl, hourly_rates_to_csv,
                         hourly_rates_to_png, run_detector)
    from .frontend import FrontendConfig
    from .models.autoencoder import load_autoencoder
    from .models.birdpass import load_bird_pass
    from .models.classifier import load_classifier

    sec = cfg.get("detect", {})
    excluded = tuple(args.exclude.split(",")) if args.exclude else \
        tuple(sec.get("excluded_class_ids", ()))
    dcfg = DetectorConfig(
        bird_pass_threshold=float(_pick(args.bird_pass_threshold, sec,
                                        "bird_pass_threshold", 0.5)),
        confidence_threshold=float(_pick(args.confidence_threshold, sec,
                                         "confidence_threshold", 0.7)),
        excluded_class_ids=excluded,
        seed=int(_pick(args.seed, sec, "seed", 0)))
    fe = FrontendConfig(**_cfg_kwargs(cfg.get("frontend", {}),
                                      FrontendConfig.__dataclass_fields__))
    rows = _corpus_rows(args.in_dir)
    if any("duration_s" not in r for r in rows):
        raise DataError("detect needs a recording_log.jsonl with duration_s "
                        "per file (mic-hour accounting)")
    sources = [{"path": _audio_path(args.in_dir, r["file"]),
                "recorder_id": r["recorder_id"],
                "start_time_utc": r["start_time_utc"]} for r in rows]
    ae = load_autoencoder(args.ae)
    bp = load_bird_pass(args.birdpass)
    clf = load_classifier(args.clf)
    res = run_detector(sources, ae, bp, clf, dcfg, fe)
    hr = aggregate_hourly(res.detections, rows,
                          class_ids=clf.taxonomy.bird_class_ids)

    os.makedirs(args.out, exist_ok=True)
    detections_to_jsonl(res.detections, os.path.join(args.out, "detections.jsonl"))
    detections_to_csv(res.detections, os.path.join(args.out, "detections.csv"))
    hourly_rates_to_csv(hr, os.path.join(args.out, "hourly_rates.csv"))
    with open(os.path.join(args.out, "counts.json"), "w") as f:
        json.dump(res.counts, f, indent=1, sort_keys=True)
    if args.plots:
        hourly_rates_to_png(hr, os.path.join(args.out, "plots"))
    inputs = {r["file"]: file_digest(s["path"])
              for r, s in zip(rows, sources)}
    write_run_manifest(os.path.join(args.out, "run-detect.json"),
                       run_manifest("detect", cfg, {"seed": dcfg.seed}, inputs))
    _emit({"counts": res.counts, "n_detections": len(res.detections),
           "total_mic_hours": hr.total_mic_hours})
    return 0


def _cmd_eval(args, cfg) -> int:
    import numpy as np

    from .metrics import ConfusionTable, metrics_to_csv, per_class_metrics

    def keyed(path):
        out = {}
        for row in _read_jsonl(path):
            if "id" not in row or "class_id" not in row:
                raise DataError(f"{path}: rows need 'id' and 'class_id'")
            if row["id"] in out:
                raise DataError(f"{path}: duplicate id {row['id']!r}")
            out[row["id"]] = row["class_id"]
        return out

    pred = keyed(args.pred)
    truth = keyed(args.truth)
    missing = sorted(set(truth) - set(pred))
    extra = sorted(set(pred) - set(truth))
    if missing:
        raise DataError(f"missing predictions for {len(missing)} ids, "
                        f"first: {missing[0]!r}")
    if extra:
        raise DataError(f"predictions for {len(extra)} unknown ids, "
                        f"first: {extra[0]!r}")
    ids = sorted(truth)
    table = ConfusionTable.from_predictions([pred[i] for i in ids],
                                            [truth[i] for i in ids])
    report = per_class_metrics(table, beta=args.beta)
    report["n_samples"] = len(ids)
    report["accuracy"] = float(np.mean([pred[i] == truth[i] for i in ids]))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
    if args.csv_out:
        with open(args.csv_out, "w") as f:
            f.write(metrics_to_csv(report))
    _emit({"macro_f": report["macro"]["f"], "accuracy": report["accuracy"],
           "n_samples": len(ids), "beta": args.beta})
    return 0


def _embeddings_for_store(store, ae_path, embedder_path, seed):
    import numpy as np

    from .detect import fix_seed_for
    from .frontend import to_fixed
    from .models.autoencoder import encode_batch, load_autoencoder
    from .models.embedder import embed_batch, load_embedder

    ae = load_autoencoder(ae_path)
    embedder = load_embedder(embedder_path)
    tfrs = store.load_all_tfrs()
    ids = sorted(tfrs)
    if not ids:
        raise DataError("store has no TFRs")
    vecs = []
    for i in range(0, len(ids), 256):
        chunk = ids[i:i + 256]
        fixed = [to_fixed(tfrs[j], fix_seed_for(seed, j)) for j in chunk]
        vecs.append(embed_batch(encode_batch(fixed, ae), embedder))
    return ids, np.concatenate(vecs, axis=0)


def _cmd_cluster(args, cfg) -> int:
    from .cluster import cluster_embeddings, save_clusters
    from .store import DatasetStore

    sec = cfg.get("cluster", {})
    threshold = float(_pick(args.threshold, sec, "threshold", 0.8))
    seed = int(_pick(args.seed, sec, "seed", 0))
    store = DatasetStore(args.store)
    ids, matrix = _embeddings_for_store(store, args.ae, args.embedder, seed)
    clusters = cluster_embeddings(list(zip(ids, matrix)), threshold=threshold)
    save_clusters(clusters, args.out)
    write_run_manifest(args.out + ".run.json",
                       run_manifest("cluster", cfg, {"seed": seed},
                                    {"tfr_ids": _ids_digest(ids),
                                     "ae": file_digest(args.ae),
                                     "embedder": file_digest(args.embedder)}))
    _emit({"n_clusters": len(clusters), "n_tfrs": len(ids),
           "threshold": threshold})
    return 0


def _cmd_serve(args, cfg) -> int:
    from .cluster import load_clusters
    from .models.classifier import ClassTaxonomy
    from .service import serve
    from .store import DatasetStore

    sec = cfg.get("serve", {})
    store = DatasetStore(args.store)
    clusters = load_clusters(args.clusters)
    taxonomy = ClassTaxonomy.from_json_file(args.taxonomy)
    embeddings = None
    if args.ae and args.embedder:
        embeddings = _embeddings_for_store(store, args.ae, args.embedder, 0)
    host = _pick(args.host, sec, "host", "127.0.0.1")
    port = int(_pick(args.port, sec, "port", 8777))
    log.info("serving on %s:%d", host, port)
    serve(store, clusters, taxonomy, host=host, port=port,
          embeddings=embeddings, static_dir=args.static)
    return 0


def _cmd_fetch_xc(args, cfg) -> int:
    from .xenocanto import DEFAULT_API_BASE, fetch_xenocanto

    sec = cfg.get("xenocanto", {})
    items = fetch_xenocanto(
        args.query, args.out, max_items=args.max_items,
        api_base=sec.get("api_base", DEFAULT_API_BASE),
        rate_limit_s=float(sec.get("rate_limit_s", 1.0)),
        max_retries=int(sec.get("max_retries", 3)))
    write_run_manifest(os.path.join(args.out, "run-fetch-xc.json"),
                       run_manifest("fetch-xc", cfg, {}, {}))
    _emit({"n_items": len(items), "xc_ids": [m["xc_id"] for m in items]})
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    epilog = ("config file keys (TOML, all optional; flags override):\n  "
              + "\n  ".join(config_keys()))
    parser = argparse.ArgumentParser(
        prog="chirpkit", epilog=epilog,
        description="Bioacoustic TFR pipeline: extraction, "
                    "semi-supervised training, detection, curation.",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file "
                        f"(schema_version {SCHEMA_VERSION})")
    common.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    common.add_argument("--workers", type=int,
                        help="torch thread count, default: logical cores")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded math for bit-stable runs")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, func, section, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text,
                           epilog=f"config section: [{section}]" if section else None)
        p.set_defaults(func=func, section=section)
        return p

    p = cmd("synth", _cmd_synth, "synth", "generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--confusers", type=int)
    p.add_argument("--duration-s", type=float)
    p.add_argument("--noise-sd", type=float)

    p = cmd("extract", _cmd_extract, "frontend",
            "extract TFRs from recordings into a store")
    p.add_argument("--in", dest="in_dir", required=True,
                   help="corpus dir (recording_log.jsonl + audio/) or flat WAV dir")
    p.add_argument("--out", required=True, help="dataset store directory")
    p.add_argument("--truth", help="truth JSONL to import as labels")

    p = cmd("mine-pairs", _cmd_mine_pairs, "pairs",
            "mine cross-channel pairs from registered audio")
    p.add_argument("--store", required=True)

    p = cmd("train-ae", _cmd_train_ae, "train_ae", "train the autoencoder")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)

    p = cmd("train-embed", _cmd_train_embed, "train_embed",
            "train the contrastive embedder head")
    p.add_argument("--store", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)

    p = cmd("train-birdpass", _cmd_train_birdpass, "train_birdpass",
            "train the binary bird-pass filter")
    p.add_argument("--store", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--sink-class", default="SINK")

    p = cmd("train-clf", _cmd_train_clf, "train_clf",
            "fine-tune the classifier on labeled TFRs")
    p.add_argument("--store", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--embedder", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--sets", type=int)
    p.add_argument("--per-class", type=int)

    p = cmd("detect", _cmd_detect, "detect",
            "run the trained stack over recordings")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--birdpass", required=True)
    p.add_argument("--clf", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bird-pass-threshold", type=float)
    p.add_argument("--confidence-threshold", type=float)
    p.add_argument("--exclude", help="comma-separated class ids to drop")
    p.add_argument("--seed", type=int)
    p.add_argument("--plots", action="store_true",
                   help="render per-class hourly-rate PNGs")

    p = cmd("eval", _cmd_eval, None, "score predictions against truth")
    p.add_argument("--pred", required=True, help="JSONL rows {id, class_id}")
    p.add_argument("--truth", required=True, help="JSONL rows {id, class_id}")
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--out", help="write full JSON report here")
    p.add_argument("--csv-out", help="write per-class CSV here")

    p = cmd("cluster", _cmd_cluster, "cluster",
            "leader-cluster embeddings for labeling")
    p.add_argument("--store", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--embedder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)

    p = cmd("serve", _cmd_serve, "serve", "run the labeling HTTP service")
    p.add_argument("--store", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--ae", help="with --embedder, enables /api/similar")
    p.add_argument("--embedder")
    p.add_argument("--static", help="built UI directory to serve at /")

    p = cmd("fetch-xc", _cmd_fetch_xc, "xenocanto",
            "download recordings from the public database")
    p.add_argument("--query", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-items", type=int)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        cfg = load_config(args.config)
        _apply_threading(args)
        return args.func(args, cfg) or 0
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except TrainingDivergedError as exc:
        log.error("training diverged: %s", exc)
        return 4
    except RemoteApiError as exc:
        log.error("remote API failure: %s", exc)
        return 5
    except DataError as exc:
        log.error("data error: %s", exc)
        return 3
    except ChirpkitError as exc:
        log.error("%s", exc)
        return 3
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return 5


if __name__ == "__main__":
    sys.exit(main())
