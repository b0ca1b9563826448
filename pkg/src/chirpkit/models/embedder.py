"""Hypersphere embedder: 512-value latent codes -> unit-norm 1024-value
embeddings, trained with an orthogonality-capped contrastive loss on
cross-channel pairs.

The loss drives paired embeddings toward alignment and everything else
toward orthogonality, not maximal separation: per ordered pair (i,j)

    l_ij = -[ z_i.z_j + beta * sum_{k != i,j} min(1 - z_i.z_k, 1)^2 ]

and the batch loss sums l over both orderings of every pair. The min
cap makes pushing a negative past orthogonal worthless (subgradient 0
on the capped branch).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch

from ..errors import DataError, StoreCorruptionError, TrainingDivergedError
from ..frontend import TFR, FixedTFR, to_fixed, to_fixed_near
from .autoencoder import AeModel, _derive_seed
from .checkpoint import load_checkpoint, save_checkpoint
from .nets import EmbedderHead, seed_everything, state_to_tensors, tensors_to_state

TfrLike = Union[TFR, FixedTFR]
_SIM_MAGIC = b"SIM1"


@dataclass
class ContrastiveConfig:
    seed: int
    beta: float = 3.0
    batch_pairs: int = 512
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    latent_dim: int = 512
    hidden_dim: int = 1024
    embed_dim: int = 1024

    def __post_init__(self):
        if self.beta <= 0:
            raise DataError("beta must be positive")
        if self.batch_pairs < 2:
            raise DataError("batch_pairs must be >= 2")


@dataclass
class EmbedderModel:
    head: EmbedderHead
    descriptor: dict
    metadata: dict = field(default_factory=dict)

    @property
    def embed_dim(self) -> int:
        return self.descriptor["embed_dim"]


def new_embedder_model(latent_dim=512, hidden_dim=1024, embed_dim=1024,
                       seed: int = 0) -> EmbedderModel:
    seed_everything(seed)
    desc = {"latent_dim": latent_dim, "hidden_dim": hidden_dim,
            "embed_dim": embed_dim}
    return EmbedderModel(head=EmbedderHead(latent_dim, hidden_dim, embed_dim),
                         descriptor=desc, metadata={"seed": seed})


def contrastive_loss(batch, beta: float = 3.0):
    """Eq. loss over a pairwise-ordered batch (rows 2p, 2p+1 are a pair).

    Accepts a (2N, D) torch tensor (differentiable) or array-like; rows
    must be unit-norm within 1e-3. Returns a 0-dim tensor for tensor
    input, float otherwise.
    """
    is_torch = isinstance(batch, torch.Tensor)
    z = batch if is_torch else torch.as_tensor(np.asarray(batch, dtype=np.float64))
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2 != 0:
        raise DataError(f"batch must be (2N, D) with N >= 1, got {tuple(z.shape)}")
    norms = torch.linalg.vector_norm(z, dim=1)
    if bool(torch.any(torch.abs(norms - 1.0) > 1e-3)):
        worst = float(torch.max(torch.abs(norms - 1.0)))
        raise DataError(f"embeddings must be unit-norm (worst deviation {worst:.2e})")

    n2 = z.shape[0]
    sim = z @ z.T
    idx = torch.arange(n2)
    partner = idx ^ 1
    pos = sim[idx, partner]
    capped = torch.clamp(1.0 - sim, max=1.0) ** 2
    mask = torch.ones_like(sim)
    mask[idx, idx] = 0.0
    mask[idx, partner] = 0.0
    loss = -(pos.sum() + beta * (capped * mask).sum())
    return loss if is_torch else float(loss)


def embed(code: np.ndarray, model: EmbedderModel) -> np.ndarray:
    """Latent code -> unit-norm embedding. Deterministic at inference."""
    return embed_batch(np.asarray(code)[None], model)[0]


def embed_batch(codes: np.ndarray, model: EmbedderModel) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float32)
    if codes.ndim != 2 or codes.shape[1] != model.descriptor["latent_dim"]:
        raise DataError(f"expected (n, {model.descriptor['latent_dim']}) codes, "
                        f"got {codes.shape}")
    model.head.eval()
    with torch.no_grad():
        z = model.head(torch.from_numpy(codes))
    return z.numpy().astype(np.float32)


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit-norm embeddings."""
    return float(np.dot(np.asarray(a, dtype=np.float64),
                        np.asarray(b, dtype=np.float64)))


def _pair_stats(z: torch.Tensor) -> tuple[float, float]:
    # mean z_i.z_partner and mean |z_i.z_k| over non-pair, non-self k
    sim = (z @ z.T).detach()
    n2 = sim.shape[0]
    idx = torch.arange(n2)
    paired = float(sim[idx, idx ^ 1].mean())
    mask = torch.ones_like(sim, dtype=torch.bool)
    mask[idx, idx] = False
    mask[idx, idx ^ 1] = False
    unpaired = float(sim[mask].abs().mean()) if n2 > 2 else 0.0
    return paired, unpaired


def _encode_pairs(pairs, ae: AeModel, seed: int, epoch: int) -> torch.Tensor:
    """Fix both members of every pair and push them through the frozen
    encoder; returns (2N, latent) float32 rows in pair order.

    The second member lands within a bounded shift of the first, which is
    all the misalignment cross-channel views of one event ever carry."""
    flat = []
    for p, (a, b) in enumerate(pairs):
        fa = a if isinstance(a, FixedTFR) else \
            to_fixed(a, _derive_seed(seed, epoch, 2 * p))
        fb = b if isinstance(b, FixedTFR) else \
            to_fixed_near(b, fa, _derive_seed(seed, epoch, 2 * p + 1))
        flat.extend([fa, fb])
    vals = np.stack([f.values for f in flat])
    x = torch.from_numpy(vals[:, None].astype(np.float32))
    ae.encoder.eval()
    outs = []
    with torch.no_grad():
        for b0 in range(0, x.shape[0], 256):
            outs.append(ae.encoder(x[b0 : b0 + 256]))
    return torch.cat(outs)


def train_embedder(pairs: Sequence[tuple[TfrLike, TfrLike]], ae: AeModel,
                   cfg: ContrastiveConfig) -> EmbedderModel:
    """Train the head on top of the frozen autoencoder's encoder.

    Pairs are re-fixed with fresh random placement every epoch (the only
    augmentation in play is that random translation). Per-epoch history
    records train loss per pair plus validation paired / |unpaired|
    similarity means.
    """
    if len(pairs) < 2:
        raise DataError("need at least 2 pairs to train")
    seed_everything(cfg.seed)
    model = new_embedder_model(cfg.latent_dim, cfg.hidden_dim, cfg.embed_dim,
                               seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    n = len(pairs)
    n_val = 500 if n >= 5000 else max(1, n // 10)
    perm = rng.permutation(n)
    val_pairs = [pairs[i] for i in perm[:n_val]]
    train_pairs = [pairs[i] for i in perm[n_val:]]
    if not train_pairs:
        raise DataError("too few pairs after holding out validation")
    val_lat = _encode_pairs(val_pairs, ae, cfg.seed, epoch=999999937)

    opt = torch.optim.Adam(model.head.parameters(), lr=cfg.lr,
                           betas=(cfg.beta1, cfg.beta2))
    history = {"train_loss": [], "val_paired_sim": [], "val_unpaired_abs_sim": []}

    for epoch in range(cfg.epochs):
        # cosine decay to 1%; a constant rate keeps eroding the paired
        # alignment late in training once the loss is near its floor
        frac = epoch / max(cfg.epochs - 1, 1)
        for g in opt.param_groups:
            g["lr"] = cfg.lr * (0.01 + 0.99 * 0.5 * (1 + np.cos(np.pi * frac)))
        lat = _encode_pairs(train_pairs, ae, cfg.seed, epoch)
        order = rng.permutation(len(train_pairs))
        model.head.train()
        losses = []
        for b0 in range(0, len(order), cfg.batch_pairs):
            rows = order[b0 : b0 + cfg.batch_pairs]
            if len(rows) < 2:
                continue
            ridx = np.stack([2 * rows, 2 * rows + 1], axis=1).reshape(-1)
            z = model.head(lat[ridx])
            loss = contrastive_loss(z, cfg.beta) / len(rows)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite contrastive loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.head.eval()
        with torch.no_grad():
            paired, unpaired = _pair_stats(model.head(val_lat))
        history["train_loss"].append(float(np.mean(losses)))
        history["val_paired_sim"].append(paired)
        history["val_unpaired_abs_sim"].append(unpaired)

    model.metadata = {"seed": cfg.seed, "epochs": cfg.epochs, "beta": cfg.beta,
                      "n_train_pairs": len(train_pairs), "n_val_pairs": n_val,
                      "loss_history": history}
    return model


def save_embedder(model: EmbedderModel, path: str) -> None:
    save_checkpoint(path, "embedder", model.descriptor,
                    state_to_tensors(model.head), model.metadata)


def load_embedder(path: str) -> EmbedderModel:
    kind, desc, tensors, meta = load_checkpoint(path)
    if kind != "embedder":
        raise DataError(f"{path}: checkpoint kind {kind!r}, expected embedder")
    model = new_embedder_model(desc["latent_dim"], desc["hidden_dim"],
                               desc["embed_dim"])
    model.metadata = meta
    tensors_to_state(model.head, tensors)
    return model


def export_similarity_matrix(path: str, ids: Sequence[str],
                             matrix: np.ndarray) -> None:
    """Little-endian f32 binary with a JSON header naming the rows."""
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.shape != (len(ids), len(ids)):
        raise DataError(f"matrix shape {matrix.shape} does not match {len(ids)} ids")
    header = json.dumps({"n": len(ids), "ids": list(ids),
                         "dtype": "<f4"}).encode()
    body = _SIM_MAGIC + struct.pack("<I", len(header)) + header + matrix.tobytes()
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))


def load_similarity_matrix(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != _SIM_MAGIC:
        raise StoreCorruptionError(f"{path}: not a similarity matrix file")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise StoreCorruptionError(f"{path}: CRC mismatch")
    hlen = struct.unpack("<I", raw[4:8])[0]
    header = json.loads(raw[8 : 8 + hlen])
    n = header["n"]
    mat = np.frombuffer(raw[8 + hlen : -4], dtype="<f4").reshape(n, n).copy()
    return list(header["ids"]), mat
