"""Binary bird-pass filter over 512-value latent codes.

Screens TFRs before classification: three dense layers, logistic
output, weighted cross-entropy with the non-bird class up-weighted so
letting noise through costs more than dropping a call. Trains on the
frozen pre-trained encoder's latents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import DataError, TrainingDivergedError
from ..metrics import fbeta
from .checkpoint import load_checkpoint, save_checkpoint
from .nets import BirdPassNet, seed_everything, state_to_tensors, tensors_to_state


@dataclass
class BirdPassConfig:
    seed: int
    nonbird_weight: float = 2.0
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    latent_dim: int = 512
    widths: tuple[int, ...] = (128, 32)
    threshold: float = 0.5
    val_fraction: float = 0.2


@dataclass
class BirdPassModel:
    net: BirdPassNet
    threshold: float
    descriptor: dict
    metadata: dict = field(default_factory=dict)


def new_bird_pass_model(latent_dim=512, widths=(128, 32), threshold=0.5,
                        seed: int = 0) -> BirdPassModel:
    seed_everything(seed)
    desc = {"latent_dim": latent_dim, "widths": list(widths),
            "threshold": threshold}
    return BirdPassModel(net=BirdPassNet(latent_dim, widths),
                         threshold=threshold, descriptor=desc,
                         metadata={"seed": seed})


def bird_pass_scores(latents: np.ndarray, model: BirdPassModel) -> np.ndarray:
    """P(bird) in [0,1] per latent code."""
    latents = np.asarray(latents, dtype=np.float32)
    single = latents.ndim == 1
    if single:
        latents = latents[None]
    if latents.shape[1] != model.descriptor["latent_dim"]:
        raise DataError(f"expected {model.descriptor['latent_dim']}-value "
                        f"latents, got {latents.shape}")
    model.net.eval()
    with torch.no_grad():
        logits = model.net(torch.from_numpy(latents))
        probs = torch.sigmoid(logits).numpy().astype(np.float64)
    return float(probs[0]) if single else probs


def _holdout(n: int, frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * frac)))
    if n_val >= n:
        raise DataError("too few samples to hold out a validation split")
    return perm[n_val:], perm[:n_val]


def train_bird_pass(bird_latents: np.ndarray, nonbird_latents: np.ndarray,
                    cfg: BirdPassConfig) -> BirdPassModel:
    """Weighted binary cross-entropy, non-bird weighted cfg.nonbird_weight.

    Callers should oversample the non-bird side (random frequency
    shifts at the TFR stage) to roughly match the bird count before
    encoding. Reports bird-class F0.5 on a held-out split in metadata.
    """
    bird = np.asarray(bird_latents, dtype=np.float32)
    nonbird = np.asarray(nonbird_latents, dtype=np.float32)
    if bird.size == 0 or nonbird.size == 0:
        raise DataError("both classes must be nonempty")
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = new_bird_pass_model(cfg.latent_dim, cfg.widths, cfg.threshold,
                                seed=cfg.seed)

    bt, bv = _holdout(len(bird), cfg.val_fraction, rng)
    nt, nv = _holdout(len(nonbird), cfg.val_fraction, rng)
    x_train = np.concatenate([bird[bt], nonbird[nt]])
    y_train = np.concatenate([np.ones(len(bt)), np.zeros(len(nt))])
    w_train = np.where(y_train > 0.5, 1.0, cfg.nonbird_weight)
    x_val = np.concatenate([bird[bv], nonbird[nv]])
    y_val = np.concatenate([np.ones(len(bv)), np.zeros(len(nv))])

    xt = torch.from_numpy(x_train)
    yt = torch.from_numpy(y_train.astype(np.float32))
    wt = torch.from_numpy(w_train.astype(np.float32))
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr,
                           betas=(cfg.beta1, cfg.beta2))
    history = []
    for epoch in range(cfg.epochs):
        model.net.train()
        order = rng.permutation(len(xt))
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[b0 : b0 + cfg.batch_size].copy())
            logits = model.net(xt[idx])
            bce = torch.nn.functional.binary_cross_entropy_with_logits(
                logits, yt[idx], reduction="none")
            loss = (wt[idx] * bce).sum() / wt[idx].sum()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))

    scores = bird_pass_scores(x_val, model)
    pred = scores >= cfg.threshold
    tp = int(np.sum(pred & (y_val > 0.5)))
    fp = int(np.sum(pred & (y_val < 0.5)))
    fn = int(np.sum(~pred & (y_val > 0.5)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    model.metadata = {"seed": cfg.seed, "epochs": cfg.epochs,
                      "nonbird_weight": cfg.nonbird_weight,
                      "loss_history": history,
                      "val_precision_bird": precision,
                      "val_recall_bird": recall,
                      "val_f05_bird": fbeta(precision, recall, 0.5),
                      "n_bird": int(len(bird)), "n_nonbird": int(len(nonbird))}
    return model


def save_bird_pass(model: BirdPassModel, path: str) -> None:
    save_checkpoint(path, "bird_pass", model.descriptor,
                    state_to_tensors(model.net), model.metadata)


def load_bird_pass(path: str) -> BirdPassModel:
    kind, desc, tensors, meta = load_checkpoint(path)
    if kind != "bird_pass":
        raise DataError(f"{path}: checkpoint kind {kind!r}, expected bird_pass")
    model = new_bird_pass_model(desc["latent_dim"], tuple(desc["widths"]),
                                desc["threshold"])
    model.metadata = meta
    tensors_to_state(model.net, tensors)
    return model
