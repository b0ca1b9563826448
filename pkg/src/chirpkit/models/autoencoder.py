"""Convolutional autoencoder: 128x256 TFR -> 512-value latent code (64x
compression) trained on mean-square reconstruction error with Adam.

Variable-width TFRs are re-fixed to 256 columns with fresh random
placement every epoch, so the model sees translated variants of each
sample; already-fixed inputs pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch

from ..errors import DataError, TrainingDivergedError
from ..frontend import TFR, FixedTFR, to_fixed
from .checkpoint import load_checkpoint, save_checkpoint
from .nets import ConvDecoder, ConvEncoder, seed_everything, state_to_tensors, tensors_to_state

TfrLike = Union[TFR, FixedTFR]


@dataclass
class AeTrainConfig:
    seed: int
    epochs: int = 97
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    input_hw: tuple[int, int] = (128, 256)
    channels: tuple[int, ...] = (16, 32, 64, 128)
    latent_dim: int = 512
    oversample_ids: dict[str, int] = field(default_factory=dict)  # id -> extra copies


@dataclass
class AeModel:
    encoder: ConvEncoder
    decoder: ConvDecoder
    descriptor: dict
    metadata: dict = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.descriptor["latent_dim"]

    @property
    def input_hw(self) -> tuple[int, int]:
        return tuple(self.descriptor["input_hw"])


def new_ae_model(input_hw=(128, 256), channels=(16, 32, 64, 128),
                 latent_dim=512, seed: int = 0) -> AeModel:
    seed_everything(seed)
    desc = {"input_hw": list(input_hw), "channels": list(channels),
            "latent_dim": latent_dim}
    enc = ConvEncoder(input_hw, channels, latent_dim)
    dec = ConvDecoder(input_hw, channels, latent_dim)
    return AeModel(encoder=enc, decoder=dec, descriptor=desc,
                   metadata={"seed": seed, "epochs": 0})


def _values_of(item: TfrLike, seed) -> np.ndarray:
    if isinstance(item, FixedTFR):
        return item.values
    return to_fixed(item, rng_seed=seed).values


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(entropy=parts[0],
                                      spawn_key=tuple(parts[1:])).generate_state(1)[0])


def _as_batch(items: Sequence[TfrLike], seeds, hw) -> torch.Tensor:
    arrs = [_values_of(it, s) for it, s in zip(items, seeds)]
    batch = np.stack(arrs)[:, None, :, :]
    if batch.shape[2:] != tuple(hw):
        raise DataError(f"expected {tuple(hw)} inputs, got {batch.shape[2:]}")
    return torch.from_numpy(batch.astype(np.float32))


def encode(tfr: TfrLike | np.ndarray, model: AeModel) -> np.ndarray:
    """Deterministic inference: one 512-value latent code."""
    return encode_batch([tfr], model)[0]


def encode_batch(tfrs: Sequence[TfrLike | np.ndarray], model: AeModel) -> np.ndarray:
    hw = model.input_hw
    arrs = []
    for t in tfrs:
        v = t if isinstance(t, np.ndarray) else t.values
        if v.shape != tuple(hw):
            raise DataError(f"expected {tuple(hw)} input, got {v.shape}")
        arrs.append(v)
    x = torch.from_numpy(np.stack(arrs)[:, None].astype(np.float32))
    model.encoder.eval()
    with torch.no_grad():
        z = model.encoder(x)
    out = z.numpy().astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise DataError("encoder produced non-finite latent code")
    return out


def decode(code: np.ndarray, model: AeModel) -> np.ndarray:
    """Latent code -> [0,1] reconstruction of shape input_hw."""
    code = np.asarray(code, dtype=np.float32)
    if code.shape[-1] != model.latent_dim:
        raise DataError(f"expected {model.latent_dim}-value code, got {code.shape}")
    single = code.ndim == 1
    z = torch.from_numpy(code[None] if single else code)
    model.decoder.eval()
    with torch.no_grad():
        x = model.decoder(z)
    out = x.squeeze(1).numpy().astype(np.float32)
    return out[0] if single else out


def train_autoencoder(dataset: Sequence[TfrLike], cfg: AeTrainConfig) -> AeModel:
    """Minimize mean-square reconstruction error over the dataset.

    `oversample_ids` duplicates designated samples in the training set
    (e.g. the curated set used later for classification, to bias what the
    compression preserves). Validation is 5,000 samples for large corpora,
    otherwise 10%, and never oversampled.
    """
    if not dataset:
        raise DataError("empty training dataset")
    seed_everything(cfg.seed)
    model = new_ae_model(cfg.input_hw, cfg.channels, cfg.latent_dim, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    n = len(dataset)
    n_val = 5000 if n >= 50000 else max(1, n // 10)
    perm = rng.permutation(n)
    val_idx = perm[:n_val]
    train_idx = list(perm[n_val:])
    if not train_idx:
        raise DataError("dataset too small to hold out validation samples")
    for i in list(train_idx):
        extra = cfg.oversample_ids.get(getattr(dataset[i], "id", None) or
                                       getattr(dataset[i], "tfr_id", ""), 0)
        train_idx.extend([i] * int(extra))
    train_idx = np.array(train_idx)

    # validation inputs are fixed once so the curve is comparable across epochs
    val_x = _as_batch([dataset[i] for i in val_idx],
                      [_derive_seed(cfg.seed, 0, int(i)) for i in val_idx],
                      cfg.input_hw)

    opt = torch.optim.Adam(
        list(model.encoder.parameters()) + list(model.decoder.parameters()),
        lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    history = {"train_mse": [], "val_mse": []}

    for epoch in range(cfg.epochs):
        model.encoder.train()
        model.decoder.train()
        order = rng.permutation(len(train_idx))
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            rows = train_idx[order[b0 : b0 + cfg.batch_size]]
            if len(rows) < 2:
                continue  # batch statistics need at least two samples
            x = _as_batch([dataset[i] for i in rows],
                          [_derive_seed(cfg.seed, 1 + epoch, int(i), j)
                           for j, i in enumerate(rows)],
                          cfg.input_hw)
            opt.zero_grad()
            recon = model.decoder(model.encoder(x))
            loss = torch.mean((recon - x) ** 2)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite reconstruction loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.encoder.eval()
        model.decoder.eval()
        with torch.no_grad():
            val_mse = float(torch.mean((model.decoder(model.encoder(val_x)) - val_x) ** 2))
        history["train_mse"].append(float(np.mean(losses)))
        history["val_mse"].append(val_mse)

    model.metadata = {"seed": cfg.seed, "epochs": cfg.epochs,
                      "n_train": int(len(train_idx)), "n_val": int(n_val),
                      "loss_history": history}
    return model


def save_autoencoder(model: AeModel, path: str) -> None:
    tensors = {}
    for prefix, mod in (("encoder.", model.encoder), ("decoder.", model.decoder)):
        for k, v in state_to_tensors(mod).items():
            tensors[prefix + k] = v
    save_checkpoint(path, "autoencoder", model.descriptor, tensors, model.metadata)


def load_autoencoder(path: str) -> AeModel:
    kind, desc, tensors, meta = load_checkpoint(path)
    if kind != "autoencoder":
        raise DataError(f"{path}: checkpoint kind {kind!r}, expected autoencoder")
    model = new_ae_model(tuple(desc["input_hw"]), tuple(desc["channels"]),
                         desc["latent_dim"])
    model.metadata = meta
    enc = {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")}
    dec = {k[len("decoder."):]: v for k, v in tensors.items() if k.startswith("decoder.")}
    tensors_to_state(model.encoder, enc)
    tensors_to_state(model.decoder, dec)
    return model
