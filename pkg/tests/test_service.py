"""HTTP contracts for the label service: pagination, PNG rendering,
event-sourced labeling, WAV snippets with byte ranges."""

import io
import struct

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image
from scipy.io import wavfile

from chirpkit.cluster import Cluster
from chirpkit.frontend import Provenance, TFR
from chirpkit.models.classifier import ClassDef, ClassTaxonomy, SpeciesDef
from chirpkit.service import create_app, render_tfr_png
from chirpkit.store import DatasetStore

N_ROWS = 128


def make_taxonomy():
    species = [SpeciesDef("s0", "species 0", "Genus sp0", 1000),
               SpeciesDef("s1", "species 1", "Genus sp1", 1001)]
    classes = [ClassDef("c0", "call 0", "s0"),
               ClassDef("c1", "call 1", "s1"),
               ClassDef("SINK", "sink", None)]
    return ClassTaxonomy(classes=classes, species=species)


def put_tfr(store, tfr_id, width=12, fill=0.5, start=1000.0):
    vals = np.full((N_ROWS, width), fill, dtype=np.float32)
    prov = Provenance(source="recA", channel_id="recA.ch0", recorder_id="recA",
                      start_time=start, t_span=(0, width - 1), f_span=(10, 30))
    store.put_tfr(TFR(values=vals, provenance=prov, id=tfr_id))
    return tfr_id


@pytest.fixture
def svc(tmp_path):
    store = DatasetStore(str(tmp_path / "store"))
    for tid in ["a", "b", "c", "d", "e", "lone"]:
        put_tfr(store, tid)
    clusters = [
        Cluster("cl00000", "a", ["a", "b", "c"], 0.95),
        Cluster("cl00001", "d", ["d", "e"], 0.91),
        Cluster("cl00002", "lone", ["lone"], 1.0),
    ]
    emb_ids = ["a", "b", "c", "d", "e", "lone"]
    mat = np.eye(8, dtype=np.float32)[:6]
    mat[1] = mat[0]  # b identical to a
    app = create_app(store, clusters, make_taxonomy(),
                     embeddings=(emb_ids, mat))
    return store, TestClient(app)


class TestClusterEndpoints:
    def test_list_all(self, svc):
        _, client = svc
        r = client.get("/api/clusters")
        assert r.status_code == 200
        body = r.json()
        assert body["total"] == 3
        assert [c["cluster_id"] for c in body["clusters"]] == [
            "cl00000", "cl00001", "cl00002"]
        assert body["clusters"][0]["size"] == 3
        assert body["clusters"][0]["label"] is None

    def test_min_size_filter(self, svc):
        _, client = svc
        body = client.get("/api/clusters", params={"min_size": 2}).json()
        assert body["total"] == 2
        assert all(c["size"] >= 2 for c in body["clusters"])

    def test_pagination(self, svc):
        _, client = svc
        p1 = client.get("/api/clusters", params={"page": 1, "page_size": 2}).json()
        p2 = client.get("/api/clusters", params={"page": 2, "page_size": 2}).json()
        assert [c["cluster_id"] for c in p1["clusters"]] == ["cl00000", "cl00001"]
        assert [c["cluster_id"] for c in p2["clusters"]] == ["cl00002"]
        assert p1["total_pages"] == 2

    def test_get_cluster_detail(self, svc):
        _, client = svc
        body = client.get("/api/clusters/cl00001").json()
        assert body["leader_tfr_id"] == "d"
        assert [m["tfr_id"] for m in body["members"]] == ["d", "e"]
        assert all(m["label"] is None for m in body["members"])

    def test_unknown_cluster_404(self, svc):
        _, client = svc
        r = client.get("/api/clusters/cl99999")
        assert r.status_code == 404
        body = r.json()
        assert set(body) == {"code", "message"}
        assert body["code"] == 404


class TestLabeling:
    def test_cluster_label_fans_out_per_member(self, svc):
        store, client = svc
        r = client.post("/api/clusters/cl00000/label",
                        json={"class_id": "c0", "author": "ann"})
        assert r.status_code == 200
        assert r.json()["labeled"] == 3
        state = store.replay()
        assert {state.labels[m] for m in ["a", "b", "c"]} == {"c0"}
        events = [e for e in store.iter_events() if e["event"] == "label_assigned"]
        assert len(events) == 3
        assert all(e["author"] == "ann" for e in events)
        cl_events = [e for e in store.iter_events() if e["event"] == "cluster_labeled"]
        assert len(cl_events) == 1 and cl_events[0]["cluster_id"] == "cl00000"

    def test_cluster_label_shows_in_listing(self, svc):
        _, client = svc
        client.post("/api/clusters/cl00001/label",
                    json={"class_id": "c1", "author": "ann"})
        body = client.get("/api/clusters").json()
        by_id = {c["cluster_id"]: c for c in body["clusters"]}
        assert by_id["cl00001"]["label"] == "c1"
        assert by_id["cl00001"]["n_labeled"] == 2
        assert by_id["cl00000"]["label"] is None

    def test_conflicting_labels_both_stored_latest_wins(self, svc):
        store, client = svc
        client.post("/api/tfr/a/label", json={"class_id": "c0", "author": "p1"})
        client.post("/api/tfr/a/label", json={"class_id": "c1", "author": "p2"})
        events = [e for e in store.iter_events()
                  if e["event"] == "label_assigned" and e["tfr_id"] == "a"]
        assert [e["class_id"] for e in events] == ["c0", "c1"]
        assert store.replay().labels["a"] == "c1"
        assert client.get("/api/tfr/a.json").json()["label"] == "c1"

    def test_unknown_class_rejected(self, svc):
        store, client = svc
        r = client.post("/api/tfr/a/label",
                        json={"class_id": "nope", "author": "p"})
        assert r.status_code == 400
        assert "nope" in r.json()["message"]
        assert not [e for e in store.iter_events()
                    if e["event"] == "label_assigned"]

    def test_unknown_tfr_404(self, svc):
        _, client = svc
        r = client.post("/api/tfr/ghost/label",
                        json={"class_id": "c0", "author": "p"})
        assert r.status_code == 404

    def test_missing_body_field_400(self, svc):
        _, client = svc
        r = client.post("/api/tfr/a/label", json={"class_id": "c0"})
        assert r.status_code == 400
        assert set(r.json()) == {"code", "message"}

    def test_progress_counts(self, svc):
        _, client = svc
        client.post("/api/clusters/cl00000/label",
                    json={"class_id": "c0", "author": "ann"})
        body = client.get("/api/progress").json()
        assert body["n_tfrs"] == 6
        assert body["n_labeled"] == 3
        assert body["n_clusters"] == 3
        assert body["n_clusters_labeled"] == 1
        assert body["per_class"] == {"c0": 3}


class TestTfrEndpoints:
    def test_png_black_and_white(self, tmp_path):
        store = DatasetStore(str(tmp_path / "s"))
        put_tfr(store, "black", fill=0.0)
        put_tfr(store, "white", fill=1.0)
        app = create_app(store, [], make_taxonomy())
        client = TestClient(app)
        for tid, level in [("black", 0), ("white", 255)]:
            r = client.get(f"/api/tfr/{tid}.png")
            assert r.status_code == 200
            assert r.headers["content-type"] == "image/png"
            img = Image.open(io.BytesIO(r.content))
            arr = np.asarray(img)
            assert img.mode == "L"
            assert arr.shape == (N_ROWS, 12)
            assert np.all(arr == level)

    def test_png_round_trip_within_one_step(self, svc, rng):
        store, client = svc
        vals = rng.uniform(0.0, 1.0, size=(N_ROWS, 20)).astype(np.float32)
        prov = Provenance(source="recA", channel_id="recA.ch0",
                          recorder_id="recA", start_time=0.0,
                          t_span=(0, 19), f_span=(0, 127))
        store.put_tfr(TFR(values=vals, provenance=prov, id="rand"))
        r = client.get("/api/tfr/rand.png")
        back = np.asarray(Image.open(io.BytesIO(r.content)), dtype=np.float64)
        recon = np.flipud(back) / 255.0
        assert np.max(np.abs(recon - vals)) <= 1.0 / 255.0 + 1e-9

    def test_png_row_zero_at_bottom(self, svc):
        store, client = svc
        vals = np.zeros((N_ROWS, 10), dtype=np.float32)
        vals[0, :] = 1.0  # lowest frequency row
        prov = Provenance(source="recA", channel_id="recA.ch0",
                          recorder_id="recA", start_time=0.0,
                          t_span=(0, 9), f_span=(0, 127))
        store.put_tfr(TFR(values=vals, provenance=prov, id="bottomrow"))
        arr = np.asarray(Image.open(io.BytesIO(
            client.get("/api/tfr/bottomrow.png").content)))
        assert np.all(arr[-1, :] == 255)  # last image row = row 0
        assert np.all(arr[0, :] == 0)

    def test_tfr_json(self, svc):
        _, client = svc
        body = client.get("/api/tfr/a.json").json()
        assert body["tfr_id"] == "a"
        assert body["width"] == 12
        assert body["n_rows"] == N_ROWS
        assert body["provenance"]["recorder_id"] == "recA"
        assert body["label"] is None

    def test_unknown_tfr_png_404(self, svc):
        _, client = svc
        r = client.get("/api/tfr/ghost.png")
        assert r.status_code == 404
        assert r.json()["code"] == 404

    def test_render_helper_direct(self):
        png = render_tfr_png(np.full((4, 6), 0.5, dtype=np.float32))
        arr = np.asarray(Image.open(io.BytesIO(png)))
        assert arr.shape == (4, 6)
        assert np.all(arr == 128)  # round(0.5*255) = 128


class TestWav:
    @pytest.fixture
    def wav_svc(self, tmp_path):
        sr = 48000
        t = np.arange(sr) / sr  # 1 s
        wave = (0.5 * np.sin(2 * np.pi * 440 * t)).astype(np.float32)
        wav_path = str(tmp_path / "recA.wav")
        wavfile.write(wav_path, sr, wave)
        store = DatasetStore(str(tmp_path / "s"))
        # event spans columns 10..20 of a recording that starts at UTC 500.0
        start = 500.0 + 10 * 512 / sr
        width = 11
        vals = np.full((N_ROWS, width), 0.3, dtype=np.float32)
        prov = Provenance(source="recA", channel_id="recA.ch0",
                          recorder_id="recA", start_time=start,
                          t_span=(10, 20), f_span=(10, 30))
        store.put_tfr(TFR(values=vals, provenance=prov, id="ev"))
        store.register_audio("recA", wav_path, start_time_utc=500.0)
        app = create_app(store, [], make_taxonomy())
        return TestClient(app)

    def test_full_wav(self, wav_svc):
        r = wav_svc.get("/api/tfr/ev.wav")
        assert r.status_code == 200
        assert r.headers["content-type"] == "audio/wav"
        assert r.headers["accept-ranges"] == "bytes"
        assert r.content[:4] == b"RIFF" and r.content[8:12] == b"WAVE"
        n_samples = struct.unpack("<I", r.content[40:44])[0] // 2
        # event duration ~0.117 s plus 0.25 s pad each side
        expect = (11 * 512 / 48000 + 0.5) * 48000
        assert abs(n_samples - expect) <= 2

    def test_byte_range(self, wav_svc):
        full = wav_svc.get("/api/tfr/ev.wav").content
        r = wav_svc.get("/api/tfr/ev.wav", headers={"Range": "bytes=0-99"})
        assert r.status_code == 206
        assert r.content == full[:100]
        assert r.headers["content-range"] == f"bytes 0-99/{len(full)}"
        r2 = wav_svc.get("/api/tfr/ev.wav", headers={"Range": "bytes=100-"})
        assert r2.status_code == 206
        assert r2.content == full[100:]
        r3 = wav_svc.get("/api/tfr/ev.wav", headers={"Range": "bytes=-50"})
        assert r3.status_code == 206
        assert r3.content == full[-50:]

    def test_unsatisfiable_range(self, wav_svc):
        full = wav_svc.get("/api/tfr/ev.wav").content
        r = wav_svc.get("/api/tfr/ev.wav",
                        headers={"Range": f"bytes={len(full) + 10}-"})
        assert r.status_code == 416

    def test_unregistered_audio_404(self, svc):
        _, client = svc
        r = client.get("/api/tfr/a.wav")
        assert r.status_code == 404


class TestTaxonomyAndSimilar:
    def test_taxonomy_endpoint(self, svc):
        _, client = svc
        body = client.get("/api/taxonomy").json()
        ids = [c["class_id"] for c in body["classes"]]
        assert ids == ["c0", "c1", "SINK"]
        assert len(body["species"]) == 2

    def test_similar_ranks_identical_first(self, svc):
        _, client = svc
        body = client.get("/api/similar", params={"tfr_id": "a", "k": 3}).json()
        assert body["similar"][0]["tfr_id"] == "b"
        assert body["similar"][0]["similarity"] == pytest.approx(1.0)
        assert len(body["similar"]) == 3
        assert all(s["similarity"] <= 1.0 + 1e-6 for s in body["similar"])

    def test_similar_excludes_query(self, svc):
        _, client = svc
        body = client.get("/api/similar", params={"tfr_id": "a", "k": 10}).json()
        assert "a" not in [s["tfr_id"] for s in body["similar"]]

    def test_similar_unknown_id(self, svc):
        _, client = svc
        assert client.get("/api/similar", params={"tfr_id": "zz"}).status_code == 404

    def test_similar_without_embeddings(self, tmp_path):
        store = DatasetStore(str(tmp_path / "s"))
        client = TestClient(create_app(store, [], make_taxonomy()))
        assert client.get("/api/similar", params={"tfr_id": "a"}).status_code == 404
