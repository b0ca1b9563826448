"""Store contracts: bit-exact TFR round-trips, checksum enforcement,
event-log replay semantics, and split assignment rules."""

import json

import numpy as np
import pytest

from chirpkit.errors import DataError, StoreCorruptionError, UnknownIdError
from chirpkit.frontend import TFR, Provenance, make_tfr
from chirpkit.store import (
    DatasetStore,
    LabeledSample,
    split_dataset,
    tfr_from_bytes,
    tfr_to_bytes,
)


def prov(source="src0", channel="src0.ch0", start=0.0, width=10):
    return Provenance(source=source, channel_id=channel, recorder_id="src0",
                      start_time=start, t_span=(0, width - 1), f_span=(5, 40))


def random_tfr(rng, width=17, tfr_id=""):
    vals = rng.uniform(0, 1, size=(128, width)).astype(np.float32)
    return TFR(values=vals, provenance=prov(width=width), id=tfr_id)


class TestBinaryFormat:
    def test_round_trip_bit_exact(self, rng):
        vals = rng.uniform(0, 1, size=(128, 33)).astype(np.float32)
        back = tfr_from_bytes(tfr_to_bytes(vals))
        assert back.dtype == np.float32
        assert np.array_equal(back, vals)  # bitwise, not approx

    def test_bad_magic(self):
        blob = tfr_to_bytes(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(StoreCorruptionError):
            tfr_from_bytes(b"XXXX" + blob[4:])

    def test_truncated(self):
        blob = tfr_to_bytes(np.ones((4, 4), dtype=np.float32))
        with pytest.raises(StoreCorruptionError):
            tfr_from_bytes(blob[:-6])

    def test_flipped_payload_byte(self):
        blob = bytearray(tfr_to_bytes(np.ones((4, 4), dtype=np.float32)))
        blob[10] ^= 0x40
        with pytest.raises(StoreCorruptionError):
            tfr_from_bytes(bytes(blob))

    def test_flipped_header_byte(self):
        blob = bytearray(tfr_to_bytes(np.ones((4, 4), dtype=np.float32)))
        blob[5] ^= 0x01  # row count
        with pytest.raises(StoreCorruptionError):
            tfr_from_bytes(bytes(blob))


class TestStoreRoundTrip:
    def test_put_get(self, tmp_path, rng):
        store = DatasetStore(str(tmp_path / "s"))
        tfr = random_tfr(rng)
        tid = store.put_tfr(tfr)
        back = store.get_tfr(tid)
        assert np.array_equal(back.values, tfr.values)
        assert back.provenance == tfr.provenance
        assert back.id == tid

    def test_content_addressed_id_stable(self, tmp_path, rng):
        store = DatasetStore(str(tmp_path / "s"))
        tfr = random_tfr(rng)
        assert store.put_tfr(tfr) == store.put_tfr(tfr)

    def test_duplicate_put_logs_one_add_event(self, tmp_path, rng):
        store = DatasetStore(str(tmp_path / "s"))
        tfr = random_tfr(rng, tfr_id="dup")
        store.put_tfr(tfr)
        store.put_tfr(tfr)
        adds = [e for e in store.iter_events() if e["event"] == "tfr_added"]
        assert len(adds) == 1

    def test_unknown_id(self, tmp_path):
        store = DatasetStore(str(tmp_path / "s"))
        assert not store.has_tfr("nope")
        with pytest.raises(UnknownIdError):
            store.get_tfr("nope")

    def test_tfr_ids_sorted(self, tmp_path, rng):
        store = DatasetStore(str(tmp_path / "s"))
        for tid in ["zz", "aa", "mm"]:
            store.put_tfr(random_tfr(rng, tfr_id=tid))
        assert store.tfr_ids() == ["aa", "mm", "zz"]

    def test_corrupt_file_detected_on_read(self, tmp_path, rng):
        store = DatasetStore(str(tmp_path / "s"))
        tid = store.put_tfr(random_tfr(rng, tfr_id="c0"))
        path = store._tfr_path(tid)
        blob = bytearray(open(path, "rb").read())
        blob[20] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(StoreCorruptionError):
            store.get_tfr(tid)


class TestEventLog:
    def test_latest_label_wins_history_kept(self, tmp_path, rng):
        store = DatasetStore(str(tmp_path / "s"))
        store.put_tfr(random_tfr(rng, tfr_id="t0"))
        store.assign_label("t0", "c0", "alice")
        store.assign_label("t0", "c1", "bob")
        state = store.replay()
        assert state.labels == {"t0": "c1"}
        assert [e["class_id"] for e in state.label_events] == ["c0", "c1"]
        assert [e["author"] for e in state.label_events] == ["alice", "bob"]

    def test_label_unknown_tfr_rejected(self, tmp_path):
        store = DatasetStore(str(tmp_path / "s"))
        with pytest.raises(UnknownIdError):
            store.assign_label("ghost", "c0", "alice")

    def test_split_events(self, tmp_path, rng):
        store = DatasetStore(str(tmp_path / "s"))
        store.put_tfr(random_tfr(rng, tfr_id="t0"))
        store.assign_split("t0", "val")
        store.assign_split("t0", "test")
        assert store.replay().splits == {"t0": "test"}
        with pytest.raises(DataError):
            store.assign_split("t0", "holdout")

    def test_unknown_event_kinds_ignored(self, tmp_path, rng):
        store = DatasetStore(str(tmp_path / "s"))
        store.put_tfr(random_tfr(rng, tfr_id="t0"))
        store.append_event({"event": "comet_sighted", "tail": "long"})
        state = store.replay()
        assert state.tfr_ids == ["t0"]
        assert state.labels == {}

    def test_replay_survives_reopen(self, tmp_path, rng):
        root = str(tmp_path / "s")
        store = DatasetStore(root)
        store.put_tfr(random_tfr(rng, tfr_id="t0"))
        store.assign_label("t0", "c0", "alice")
        reopened = DatasetStore(root)
        state = reopened.replay()
        assert state.labels == {"t0": "c0"}
        assert state.labeled_samples()[0].class_id == "c0"

    def test_events_have_timestamps(self, tmp_path, rng):
        store = DatasetStore(str(tmp_path / "s"))
        store.put_tfr(random_tfr(rng, tfr_id="t0"))
        assert all("ts" in e for e in store.iter_events())


class TestPairManifest:
    def test_round_trip(self, tmp_path):
        from chirpkit.pairs import TfrPair
        store = DatasetStore(str(tmp_path / "s"))
        pairs = [TfrPair("a", "b", 0.987654321, 0.0021),
                 TfrPair("c", "d", 0.75, -0.0103)]
        assert store.write_pairs(pairs) == 2
        back = store.read_pairs()
        assert back[0] == {"tfr_a_id": "a", "tfr_b_id": "b",
                           "xcorr_peak": 0.987654, "lag_s": 0.0021}
        assert back[1]["lag_s"] == -0.0103

    def test_empty(self, tmp_path):
        store = DatasetStore(str(tmp_path / "s"))
        assert store.read_pairs() == []


class TestAudioRegistry:
    def test_entry_round_trip(self, tmp_path):
        store = DatasetStore(str(tmp_path / "s"))
        wav = tmp_path / "r.wav"
        wav.write_bytes(b"not really audio")
        store.register_audio("rec7", str(wav), start_time_utc=1234.5)
        path, start = store.audio_entry_for("rec7")
        assert path == str(wav)
        assert start == 1234.5
        assert store.audio_path_for("rec7") == str(wav)
        assert store.audio_entry_for("other") is None

    def test_legacy_bare_path_entry(self, tmp_path):
        store = DatasetStore(str(tmp_path / "s"))
        index = store.audio_dir + "/index.json"
        with open(index, "w") as f:
            json.dump({"old": "/tmp/old.wav"}, f)
        assert store.audio_entry_for("old") == ("/tmp/old.wav", 0.0)


class TestSplitDataset:
    def mk(self, class_id, n, prefix=""):
        return [LabeledSample(tfr_id=f"{prefix}{class_id}-{i:03d}", class_id=class_id)
                for i in range(n)]

    def test_exactly_three_goes_one_each(self):
        out, report = split_dataset(self.mk("c0", 3), seed=0)
        counts = {s.split: 0 for s in out}
        for s in out:
            counts[s.split] += 1
        assert counts == {"train": 1, "val": 1, "test": 1}
        assert report["dropped_classes"] == {}

    def test_training_priority(self):
        out, _ = split_dataset(self.mk("c0", 10), seed=1)
        by_split = {}
        for s in out:
            by_split.setdefault(s.split, []).append(s)
        assert len(by_split["train"]) == 8
        assert len(by_split["val"]) == 1
        assert len(by_split["test"]) == 1

    def test_small_class_dropped_and_reported(self):
        samples = self.mk("big", 5) + self.mk("tiny", 2)
        out, report = split_dataset(samples, seed=3)
        assert all(s.class_id == "big" for s in out)
        assert report["dropped_classes"] == {"tiny": 2}
        assert report["kept_classes"] == ["big"]

    def test_deterministic_per_seed(self):
        samples = self.mk("c0", 20) + self.mk("c1", 7)
        a, _ = split_dataset(samples, seed=42)
        b, _ = split_dataset(samples, seed=42)
        assert [(s.tfr_id, s.split) for s in a] == [(s.tfr_id, s.split) for s in b]
        c, _ = split_dataset(samples, seed=43)
        assert [(s.tfr_id, s.split) for s in a] != [(s.tfr_id, s.split) for s in c]

    def test_groups_stay_together(self):
        # two channels per recording share a group key
        samples = []
        groups = {}
        for r in range(6):
            for ch in range(2):
                tid = f"rec{r}.ch{ch}"
                samples.append(LabeledSample(tfr_id=tid, class_id="c0"))
                groups[tid] = f"rec{r}"
        out, _ = split_dataset(samples, seed=5, groups=groups)
        split_of = {s.tfr_id: s.split for s in out}
        for r in range(6):
            assert split_of[f"rec{r}.ch0"] == split_of[f"rec{r}.ch1"]
        assert sorted(set(split_of.values())) == ["test", "train", "val"]

    def test_too_few_groups_dropped(self):
        samples = [LabeledSample(tfr_id=f"t{i}", class_id="c0") for i in range(4)]
        groups = {"t0": "g0", "t1": "g0", "t2": "g1", "t3": "g1"}
        out, report = split_dataset(samples, seed=0, groups=groups)
        assert out == []
        assert report["dropped_classes"] == {"c0": 4}

    def test_augmented_from_passes_through(self):
        samples = self.mk("c0", 3)
        samples[0].augmented_from = "orig-id"
        out, _ = split_dataset(samples, seed=0)
        by_id = {s.tfr_id: s for s in out}
        assert by_id[samples[0].tfr_id].augmented_from == "orig-id"
