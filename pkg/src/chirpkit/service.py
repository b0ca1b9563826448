"""HTTP label service: cluster inspection and label assignment.

Stateless between requests except through the dataset store; label
posts append events (never mutate), so conflicting writes both survive
in the audit trail and the latest one wins in the materialized view.
"""

from __future__ import annotations

import io
import os
import re
import struct
from typing import Sequence

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from .cluster import Cluster
from .errors import UnknownIdError
from .frontend import HOP
from .models.classifier import ClassTaxonomy
from .store import DatasetStore

WAV_PAD_S = 0.25


def render_tfr_png(values: np.ndarray) -> bytes:
    """Grayscale PNG, 0 -> black, 1 -> white, row 0 at the image bottom."""
    gray = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = Image.fromarray(np.flipud(gray), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


class LabelBody(BaseModel):
    class_id: str
    author: str


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"code": status, "message": message})


def _wav_bytes(samples: np.ndarray, sr: int) -> bytes:
    pcm = np.clip(samples, -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2").tobytes()
    hdr = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVEfmt "
    hdr += struct.pack("<IHHIIHH", 16, 1, 1, sr, sr * 2, 2, 16)
    hdr += b"data" + struct.pack("<I", len(pcm))
    return hdr + pcm


def _range_response(blob: bytes, range_header: str | None,
                    media_type: str) -> Response:
    total = len(blob)
    if not range_header:
        return Response(content=blob, media_type=media_type,
                        headers={"Accept-Ranges": "bytes"})
    m = re.fullmatch(r"bytes=(\d*)-(\d*)", range_header.strip())
    if not m or (not m.group(1) and not m.group(2)):
        return _error(416, "malformed Range header")
    start = int(m.group(1)) if m.group(1) else None
    end = int(m.group(2)) if m.group(2) else None
    if start is None:  # suffix form: last N bytes
        start = max(total - end, 0)
        end = total - 1
    else:
        end = min(end if end is not None else total - 1, total - 1)
    if start >= total or start > end:
        return _error(416, "requested range not satisfiable")
    part = blob[start : end + 1]
    return Response(content=part, status_code=206, media_type=media_type,
                    headers={"Accept-Ranges": "bytes",
                             "Content-Range": f"bytes {start}-{end}/{total}"})


def create_app(store: DatasetStore,
               clusters: Sequence[Cluster],
               taxonomy: ClassTaxonomy,
               embeddings: tuple[list[str], np.ndarray] | None = None,
               static_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="chirpkit label service")
    clusters = list(clusters)
    by_id = {c.cluster_id: c for c in clusters}
    class_ids = set(taxonomy.class_ids)
    emb_index = None
    if embeddings is not None:
        emb_ids, emb_mat = embeddings
        emb_index = ({tid: i for i, tid in enumerate(emb_ids)}, emb_ids,
                     np.asarray(emb_mat, dtype=np.float32))

    @app.exception_handler(UnknownIdError)
    async def _unknown(request: Request, exc: UnknownIdError):
        return _error(404, str(exc))

    @app.exception_handler(RequestValidationError)
    async def _invalid(request: Request, exc: RequestValidationError):
        return _error(400, str(exc.errors()[0].get("msg", "invalid request")))

    def materialize():
        """Latest-wins view of labels plus cluster-level label events."""
        state = store.replay()
        cluster_labels: dict[str, str] = {}
        for ev in store.iter_events():
            if ev.get("event") == "cluster_labeled":
                cluster_labels[ev["cluster_id"]] = ev["class_id"]
        return state, cluster_labels

    def cluster_summary(c: Cluster, state, cluster_labels) -> dict:
        labeled = sum(1 for m in c.member_tfr_ids if m in state.labels)
        return {"cluster_id": c.cluster_id,
                "leader_tfr_id": c.leader_tfr_id,
                "size": len(c.member_tfr_ids),
                "mean_internal_similarity": c.mean_internal_similarity,
                "label": cluster_labels.get(c.cluster_id),
                "n_labeled": labeled}

    @app.get("/api/clusters")
    def list_clusters(min_size: int = 1, page: int = 1, page_size: int = 20):
        if page < 1 or page_size < 1 or page_size > 500:
            return _error(400, "page and page_size must be positive (page_size <= 500)")
        state, cluster_labels = materialize()
        rows = [c for c in clusters if len(c.member_tfr_ids) >= min_size]
        total = len(rows)
        start = (page - 1) * page_size
        items = [cluster_summary(c, state, cluster_labels)
                 for c in rows[start : start + page_size]]
        return {"clusters": items, "page": page, "page_size": page_size,
                "total": total,
                "total_pages": max((total + page_size - 1) // page_size, 1)}

    @app.get("/api/clusters/{cluster_id}")
    def get_cluster(cluster_id: str):
        c = by_id.get(cluster_id)
        if c is None:
            return _error(404, f"no cluster {cluster_id}")
        state, cluster_labels = materialize()
        out = cluster_summary(c, state, cluster_labels)
        out["members"] = [{"tfr_id": m, "label": state.labels.get(m)}
                          for m in c.member_tfr_ids]
        return out

    @app.post("/api/clusters/{cluster_id}/label")
    def label_cluster(cluster_id: str, body: LabelBody):
        c = by_id.get(cluster_id)
        if c is None:
            return _error(404, f"no cluster {cluster_id}")
        if body.class_id not in class_ids:
            return _error(400, f"unknown class_id {body.class_id!r}")
        for m in c.member_tfr_ids:
            store.assign_label(m, body.class_id, body.author)
        store.append_event({"event": "cluster_labeled", "cluster_id": cluster_id,
                            "class_id": body.class_id, "author": body.author})
        return {"labeled": len(c.member_tfr_ids), "class_id": body.class_id}

    @app.post("/api/tfr/{tfr_id}/label")
    def label_tfr(tfr_id: str, body: LabelBody):
        if body.class_id not in class_ids:
            return _error(400, f"unknown class_id {body.class_id!r}")
        store.assign_label(tfr_id, body.class_id, body.author)
        return {"labeled": 1, "class_id": body.class_id}

    @app.get("/api/tfr/{tfr_id}.png")
    def tfr_png(tfr_id: str):
        tfr = store.get_tfr(tfr_id)
        return Response(content=render_tfr_png(tfr.values),
                        media_type="image/png")

    @app.get("/api/tfr/{tfr_id}.json")
    def tfr_json(tfr_id: str):
        tfr = store.get_tfr(tfr_id)
        state, _ = materialize()
        return {"tfr_id": tfr_id,
                "width": int(tfr.values.shape[1]),
                "n_rows": int(tfr.values.shape[0]),
                "provenance": tfr.provenance.to_dict() if tfr.provenance else None,
                "label": state.labels.get(tfr_id),
                "split": state.splits.get(tfr_id)}

    @app.get("/api/tfr/{tfr_id}.wav")
    def tfr_wav(tfr_id: str, request: Request):
        tfr = store.get_tfr(tfr_id)
        if tfr.provenance is None:
            return _error(404, f"{tfr_id} has no provenance")
        entry = store.audio_entry_for(tfr.provenance.source)
        if entry is None or not os.path.exists(entry[0]):
            return _error(404, f"source audio for {tfr_id} not registered")
        from .audio import load_wav
        segments = load_wav(entry[0], recorder_id=tfr.provenance.recorder_id,
                            start_time_utc=entry[1])
        seg = next((s for s in segments
                    if s.channel_id == tfr.provenance.channel_id),
                   segments[0])
        t0 = tfr.provenance.start_time - WAV_PAD_S
        t1 = tfr.provenance.start_time + \
            tfr.values.shape[1] * HOP / seg.sample_rate_hz + WAV_PAD_S
        snippet = seg.slice_time(t0, t1)
        blob = _wav_bytes(snippet, seg.sample_rate_hz)
        return _range_response(blob, request.headers.get("range"), "audio/wav")

    @app.get("/api/taxonomy")
    def get_taxonomy():
        return taxonomy.to_dict()

    @app.get("/api/progress")
    def progress():
        state, cluster_labels = materialize()
        per_class: dict[str, int] = {}
        for cid in state.labels.values():
            per_class[cid] = per_class.get(cid, 0) + 1
        return {"n_tfrs": len(store.tfr_ids()),
                "n_labeled": len(state.labels),
                "n_clusters": len(clusters),
                "n_clusters_labeled": len([c for c in clusters
                                           if c.cluster_id in cluster_labels]),
                "per_class": per_class}

    @app.get("/api/similar")
    def similar(tfr_id: str, k: int = 10):
        if emb_index is None:
            return _error(404, "no embeddings loaded")
        index, ids, mat = emb_index
        if tfr_id not in index:
            return _error(404, f"no embedding for {tfr_id}")
        if k < 1:
            return _error(400, "k must be >= 1")
        sims = mat @ mat[index[tfr_id]]
        order = np.argsort(-sims)
        out = []
        for i in order:
            if ids[i] == tfr_id:
                continue
            out.append({"tfr_id": ids[i], "similarity": float(sims[i])})
            if len(out) == k:
                break
        return {"tfr_id": tfr_id, "similar": out}

    if static_dir:
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app


def serve(store: DatasetStore, clusters: Sequence[Cluster],
          taxonomy: ClassTaxonomy, host: str = "127.0.0.1", port: int = 8777,
          embeddings=None, static_dir: str | None = None) -> None:
    import uvicorn
    app = create_app(store, clusters, taxonomy, embeddings=embeddings,
                     static_dir=static_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
