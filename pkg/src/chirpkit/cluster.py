"""Single-pass leader clustering of unit-norm embeddings.

No cluster count to choose: the similarity threshold maps directly onto
the hypersphere geometry the embedder was trained for. Deterministic in
the input order; output sorted by size descending.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError


@dataclass
class Cluster:
    cluster_id: str
    leader_tfr_id: str
    member_tfr_ids: list[str]
    mean_internal_similarity: float
    label: str | None = None

    def to_dict(self) -> dict:
        return {"cluster_id": self.cluster_id,
                "leader_tfr_id": self.leader_tfr_id,
                "member_tfr_ids": list(self.member_tfr_ids),
                "mean_internal_similarity": self.mean_internal_similarity,
                "label": self.label}

    @staticmethod
    def from_dict(d: dict) -> "Cluster":
        return Cluster(cluster_id=d["cluster_id"],
                       leader_tfr_id=d["leader_tfr_id"],
                       member_tfr_ids=list(d["member_tfr_ids"]),
                       mean_internal_similarity=d["mean_internal_similarity"],
                       label=d.get("label"))


def cluster_embeddings(embeddings: Sequence[tuple[str, np.ndarray]],
                       threshold: float = 0.8) -> list[Cluster]:
    """Assign each embedding to the first existing cluster whose LEADER
    similarity reaches the threshold, else found a new cluster led by it.
    """
    ids = [i for i, _ in embeddings]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate tfr_id in embeddings")
    leaders: list[np.ndarray] = []
    groups: list[list[int]] = []
    vecs = []
    for idx, (tfr_id, vec) in enumerate(embeddings):
        v = np.asarray(vec, dtype=np.float64)
        if abs(np.linalg.norm(v) - 1.0) > 1e-3:
            raise DataError(f"embedding for {tfr_id!r} is not unit-norm")
        vecs.append(v)
        placed = False
        for gi, leader in enumerate(leaders):
            if float(leader @ v) >= threshold:
                groups[gi].append(idx)
                placed = True
                break
        if not placed:
            leaders.append(v)
            groups.append([idx])

    order = sorted(range(len(groups)), key=lambda g: (-len(groups[g]), g))
    clusters = []
    for rank, gi in enumerate(order):
        members = groups[gi]
        leader_vec = leaders[gi]
        sims = [float(leader_vec @ vecs[m]) for m in members]
        clusters.append(Cluster(
            cluster_id=f"cl{rank:05d}",
            leader_tfr_id=ids[members[0]],
            member_tfr_ids=[ids[m] for m in members],
            mean_internal_similarity=float(np.mean(sims))))
    return clusters


def save_clusters(clusters: Sequence[Cluster], path: str) -> None:
    with open(path, "w") as f:
        json.dump([c.to_dict() for c in clusters], f, indent=1)


def load_clusters(path: str) -> list[Cluster]:
    with open(path) as f:
        return [Cluster.from_dict(d) for d in json.load(f)]
