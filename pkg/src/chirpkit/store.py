"""Persistent dataset store: TFR payloads, append-only label/split events,
pair manifests, and model checkpoints.

Layout under the store root:
    tfrs/<id>.tfr        binary payload (format below) + <id>.json sidecar
    manifests/events.jsonl   append-only event log (labels, splits, adds)
    manifests/pairs.jsonl    pair manifest from the miner
    models/              checkpoints
    audio/               source WAV files registered for snippet serving

TFR binary format "TFR1": magic, u16 rows, u16 cols, little-endian f32
row-major payload, CRC-32 trailer over rows+cols+payload. Bit-exact
round-trips are a hard requirement; every read verifies the checksum.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import DataError, StoreCorruptionError, UnknownIdError
from .frontend import TFR, Provenance, make_tfr, tfr_id_for

MAGIC = b"TFR1"


def tfr_to_bytes(values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4")
    rows, cols = values.shape
    head = struct.pack("<HH", rows, cols)
    payload = values.tobytes()
    crc = zlib.crc32(head + payload) & 0xFFFFFFFF
    return MAGIC + head + payload + struct.pack("<I", crc)


def tfr_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise StoreCorruptionError("bad magic; not a TFR1 record")
    rows, cols = struct.unpack("<HH", blob[4:8])
    n = rows * cols * 4
    payload = blob[8 : 8 + n]
    if len(payload) != n or len(blob) < 8 + n + 4:
        raise StoreCorruptionError("truncated TFR record")
    (crc_stored,) = struct.unpack("<I", blob[8 + n : 12 + n])
    if zlib.crc32(blob[4 : 8 + n]) & 0xFFFFFFFF != crc_stored:
        raise StoreCorruptionError("TFR checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


@dataclass
class LabeledSample:
    tfr_id: str
    class_id: str
    split: str = "train"  # train|val|test
    augmented_from: str | None = None


@dataclass
class DatasetState:
    """Materialized view of the event log."""

    tfr_ids: list[str] = field(default_factory=list)
    labels: dict[str, str] = field(default_factory=dict)        # tfr_id -> class_id
    splits: dict[str, str] = field(default_factory=dict)        # tfr_id -> split
    label_events: list[dict] = field(default_factory=list)      # full audit trail

    def labeled_samples(self) -> list[LabeledSample]:
        return [LabeledSample(tfr_id=t, class_id=c, split=self.splits.get(t, "train"))
                for t, c in sorted(self.labels.items())]


class DatasetStore:
    """Content-addressed TFR store with a single serialized event writer."""

    def __init__(self, root: str):
        self.root = root
        for sub in ("tfrs", "manifests", "models", "audio"):
            os.makedirs(os.path.join(root, sub), exist_ok=True)
        self._write_lock = threading.Lock()

    # -- paths ------------------------------------------------------------

    def _tfr_path(self, tfr_id: str) -> str:
        return os.path.join(self.root, "tfrs", f"{tfr_id}.tfr")

    @property
    def events_path(self) -> str:
        return os.path.join(self.root, "manifests", "events.jsonl")

    @property
    def pairs_path(self) -> str:
        return os.path.join(self.root, "manifests", "pairs.jsonl")

    @property
    def models_dir(self) -> str:
        return os.path.join(self.root, "models")

    @property
    def audio_dir(self) -> str:
        return os.path.join(self.root, "audio")

    # -- TFR payloads -----------------------------------------------------

    def put_tfr(self, tfr: TFR) -> str:
        tfr_id = tfr.id or tfr_id_for(tfr.values, tfr.provenance)
        path = self._tfr_path(tfr_id)
        if not os.path.exists(path):
            tmp = path + ".tmp"
            with open(tmp, "wb") as f:
                f.write(tfr_to_bytes(tfr.values))
            os.replace(tmp, path)
            with open(path.replace(".tfr", ".json"), "w") as f:
                json.dump({"id": tfr_id, "provenance": tfr.provenance.to_dict()}, f)
            self.append_event({"event": "tfr_added", "id": tfr_id})
        return tfr_id

    def get_tfr(self, tfr_id: str) -> TFR:
        path = self._tfr_path(tfr_id)
        if not os.path.exists(path):
            raise UnknownIdError(f"no TFR with id {tfr_id}")
        with open(path, "rb") as f:
            values = tfr_from_bytes(f.read())
        with open(path.replace(".tfr", ".json")) as f:
            meta = json.load(f)
        return TFR(values=values, provenance=Provenance.from_dict(meta["provenance"]),
                   id=tfr_id)

    def has_tfr(self, tfr_id: str) -> bool:
        return os.path.exists(self._tfr_path(tfr_id))

    def tfr_ids(self) -> list[str]:
        names = os.listdir(os.path.join(self.root, "tfrs"))
        return sorted(n[:-4] for n in names if n.endswith(".tfr"))

    def load_all_tfrs(self) -> dict[str, TFR]:
        return {i: self.get_tfr(i) for i in self.tfr_ids()}

    # -- event log ----------------------------------------------------------

    def append_event(self, event: dict) -> None:
        event = dict(event)
        event.setdefault("ts", time.time())
        with self._write_lock:
            with open(self.events_path, "a") as f:
                f.write(json.dumps(event) + "\n")

    def iter_events(self) -> Iterator[dict]:
        if not os.path.exists(self.events_path):
            return
        with open(self.events_path) as f:
            for line in f:
                line = line.strip()
                if line:
                    yield json.loads(line)

    def assign_label(self, tfr_id: str, class_id: str, author: str) -> None:
        """Labels append, never mutate; the latest event wins in the view."""
        if not self.has_tfr(tfr_id):
            raise UnknownIdError(f"no TFR with id {tfr_id}")
        self.append_event({"event": "label_assigned", "tfr_id": tfr_id,
                           "class_id": class_id, "author": author})

    def assign_split(self, tfr_id: str, split: str) -> None:
        if split not in ("train", "val", "test"):
            raise DataError(f"invalid split {split!r}")
        self.append_event({"event": "split_assigned", "tfr_id": tfr_id, "split": split})

    def replay(self) -> DatasetState:
        """Rebuild dataset state purely from the event log."""
        state = DatasetState()
        seen = set()
        for ev in self.iter_events():
            kind = ev.get("event")
            if kind == "tfr_added" and ev["id"] not in seen:
                seen.add(ev["id"])
                state.tfr_ids.append(ev["id"])
            elif kind == "label_assigned":
                state.labels[ev["tfr_id"]] = ev["class_id"]
                state.label_events.append(ev)
            elif kind == "split_assigned":
                state.splits[ev["tfr_id"]] = ev["split"]
        return state

    # -- pair manifest ------------------------------------------------------

    def write_pairs(self, pairs: Iterable) -> int:
        n = 0
        with self._write_lock:
            with open(self.pairs_path, "w") as f:
                for p in pairs:
                    f.write(json.dumps({
                        "tfr_a_id": p.tfr_a_id, "tfr_b_id": p.tfr_b_id,
                        "xcorr_peak": round(float(p.xcorr_peak), 6),
                        "lag_s": round(float(p.lag_s), 6),
                    }) + "\n")
                    n += 1
        return n

    def read_pairs(self) -> list[dict]:
        if not os.path.exists(self.pairs_path):
            return []
        with open(self.pairs_path) as f:
            return [json.loads(line) for line in f if line.strip()]

    # -- audio registry -------------------------------------------------------

    def register_audio(self, source: str, path: str,
                       start_time_utc: float = 0.0) -> None:
        """Record where the raw audio for provenance `source` lives."""
        index_path = os.path.join(self.audio_dir, "index.json")
        with self._write_lock:
            index = {}
            if os.path.exists(index_path):
                with open(index_path) as f:
                    index = json.load(f)
            index[source] = {"path": os.path.abspath(path),
                             "start_time_utc": float(start_time_utc)}
            with open(index_path, "w") as f:
                json.dump(index, f, indent=0)

    def audio_entry_for(self, source: str) -> tuple[str, float] | None:
        """(path, start_time_utc) for a registered source, or None."""
        index_path = os.path.join(self.audio_dir, "index.json")
        if not os.path.exists(index_path):
            return None
        with open(index_path) as f:
            entry = json.load(f).get(source)
        if entry is None:
            return None
        if isinstance(entry, str):  # older index rows stored a bare path
            return entry, 0.0
        return entry["path"], float(entry.get("start_time_utc", 0.0))

    def audio_path_for(self, source: str) -> str | None:
        entry = self.audio_entry_for(source)
        return entry[0] if entry else None


def split_dataset(
    samples: list[LabeledSample],
    seed: int,
    groups: Mapping[str, str] | None = None,
) -> tuple[list[LabeledSample], dict]:
    """Assign train/val/test with training priority.

    Every class keeps at least one validation and one test sample; the rest
    go to training. Classes with fewer than 3 samples are dropped and
    reported. When `groups` maps tfr_id -> group key, all samples of a
    group land in the same split (use it to keep the two channels of one
    recording together).
    """
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[LabeledSample]] = {}
    for s in samples:
        by_class.setdefault(s.class_id, []).append(s)

    out: list[LabeledSample] = []
    dropped: dict[str, int] = {}
    for class_id in sorted(by_class):
        members = sorted(by_class[class_id], key=lambda s: s.tfr_id)
        if groups:
            unit_keys = sorted({groups.get(s.tfr_id, s.tfr_id) for s in members})
        else:
            unit_keys = [s.tfr_id for s in members]
        if len(unit_keys) < 3:
            dropped[class_id] = len(members)
            continue
        order = list(rng.permutation(len(unit_keys)))
        val_key = unit_keys[order[0]]
        test_key = unit_keys[order[1]]
        for s in members:
            key = groups.get(s.tfr_id, s.tfr_id) if groups else s.tfr_id
            split = "val" if key == val_key else "test" if key == test_key else "train"
            out.append(LabeledSample(tfr_id=s.tfr_id, class_id=s.class_id,
                                     split=split, augmented_from=s.augmented_from))
    report = {"dropped_classes": dropped,
              "kept_classes": sorted(set(s.class_id for s in out))}
    return out, report
