"""Torch network definitions plus descriptor-based (re)construction.

Every network is fully described by a plain-dict descriptor so checkpoints
can rebuild the exact architecture without pickling code.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn


def conv_out_hw(input_hw: tuple[int, int], n_stages: int) -> tuple[int, int]:
    h, w = input_hw
    for _ in range(n_stages):
        h = (h + 1) // 2
        w = (w + 1) // 2
    return h, w


class ConvEncoder(nn.Module):
    """Stride-2 3x3 convolution stack ending in a dense latent projection.

    Batch normalization after every convolution and on the latent keeps
    activation scale bounded end to end. Without the latent norm the two
    dense projections drift to large magnitudes and their relative
    gradient steps shrink by orders of magnitude, which stalls training
    (inference uses stored statistics, so encode stays deterministic)."""

    def __init__(self, input_hw=(128, 256), channels=(16, 32, 64, 128), latent_dim=512):
        super().__init__()
        layers = []
        in_ch = 1
        for ch in channels:
            layers += [nn.Conv2d(in_ch, ch, 3, stride=2, padding=1),
                       nn.BatchNorm2d(ch), nn.ReLU()]
            in_ch = ch
        self.conv = nn.Sequential(*layers)
        oh, ow = conv_out_hw(input_hw, len(channels))
        self.fc = nn.Linear(channels[-1] * oh * ow, latent_dim)
        self.latent_bn = nn.BatchNorm1d(latent_dim)

    def forward(self, x):  # (B, 1, H, W) -> (B, latent)
        h = self.conv(x)
        return self.latent_bn(self.fc(h.flatten(1)))


class ConvDecoder(nn.Module):
    """Mirror of ConvEncoder; logistic output keeps cells in [0, 1]."""

    def __init__(self, input_hw=(128, 256), channels=(16, 32, 64, 128), latent_dim=512):
        super().__init__()
        self.oh, self.ow = conv_out_hw(input_hw, len(channels))
        self.head_ch = channels[-1]
        self.fc = nn.Linear(latent_dim, channels[-1] * self.oh * self.ow)
        self.head_bn = nn.BatchNorm2d(channels[-1])
        layers = []
        rev = list(channels[::-1])
        for i, ch in enumerate(rev):
            out_ch = rev[i + 1] if i + 1 < len(rev) else 1
            layers.append(nn.ConvTranspose2d(ch, out_ch, 3, stride=2,
                                             padding=1, output_padding=1))
            if i + 1 < len(rev):
                layers += [nn.BatchNorm2d(out_ch), nn.ReLU()]
            else:
                # start the output near the sparse-background prior instead
                # of 0.5 everywhere, so no epochs are spent relearning it
                nn.init.constant_(layers[-1].bias, -4.0)
                layers.append(nn.Sigmoid())
        self.deconv = nn.Sequential(*layers)

    def forward(self, z):  # (B, latent) -> (B, 1, H, W)
        h = self.fc(z).reshape(-1, self.head_ch, self.oh, self.ow)
        return self.deconv(self.head_bn(h))


class EmbedderHead(nn.Module):
    """Latent -> unit-norm embedding: two rectified dense layers, a tanh
    dense layer, and L2 normalization onto the hypersphere."""

    def __init__(self, latent_dim=512, hidden_dim=1024, embed_dim=1024):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, embed_dim), nn.Tanh(),
        )

    def forward(self, z):
        e = self.net(z)
        return e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class DenseHead(nn.Module):
    """Four dense layers with batch normalization between them; emits
    logits over C+1 classes (softmax applied by the caller)."""

    def __init__(self, in_dim=1024, widths=(1024, 512, 256), n_classes=2):
        super().__init__()
        layers = []
        prev = in_dim
        for w in widths:
            layers += [nn.Linear(prev, w), nn.BatchNorm1d(w), nn.ReLU()]
            prev = w
        layers.append(nn.Linear(prev, n_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, e):
        return self.net(e)


class BirdPassNet(nn.Module):
    """Three dense layers over the latent code; emits one logit."""

    def __init__(self, latent_dim=512, widths=(128, 32)):
        super().__init__()
        layers, prev = [], latent_dim
        for w in widths:
            layers += [nn.Linear(prev, w), nn.ReLU()]
            prev = w
        layers.append(nn.Linear(prev, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z).squeeze(-1)


def build_from_descriptor(desc: dict) -> nn.Module:
    kind = desc["kind"]
    if kind == "conv_encoder":
        return ConvEncoder(tuple(desc["input_hw"]), tuple(desc["channels"]),
                           desc["latent_dim"])
    if kind == "conv_decoder":
        return ConvDecoder(tuple(desc["input_hw"]), tuple(desc["channels"]),
                           desc["latent_dim"])
    if kind == "embedder_head":
        return EmbedderHead(desc["latent_dim"], desc["hidden_dim"], desc["embed_dim"])
    if kind == "dense_head":
        return DenseHead(desc["in_dim"], tuple(desc["widths"]), desc["n_classes"])
    if kind == "bird_pass":
        return BirdPassNet(desc["latent_dim"], tuple(desc["widths"]))
    raise ValueError(f"unknown architecture kind {kind!r}")


def state_to_tensors(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32)
            for k, v in module.state_dict().items()}


def tensors_to_state(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {}
    for k, v in module.state_dict().items():
        if k not in tensors:
            raise KeyError(f"checkpoint missing tensor {k}")
        state[k] = torch.from_numpy(np.ascontiguousarray(tensors[k])).to(v.dtype).reshape(v.shape)
    module.load_state_dict(state)


def seed_everything(seed: int) -> None:
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
