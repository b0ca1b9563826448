"""Supervised stage: 4-layer dense classifier over embeddings with a
weighted sink class, fine-tuned end to end (encoder and embedder
included, nothing frozen) on an alternating schedule of 5 cross-entropy
epochs then 1 contrastive epoch per set.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np
import torch

from ..errors import DataError, TrainingDivergedError
from ..frontend import TFR, FixedTFR, to_fixed, to_fixed_near
from ..store import LabeledSample
from .autoencoder import AeModel, _derive_seed, _values_of, new_ae_model
from .checkpoint import load_checkpoint, save_checkpoint
from .embedder import EmbedderModel, contrastive_loss, new_embedder_model, _pair_stats
from .nets import DenseHead, seed_everything, state_to_tensors, tensors_to_state

TfrLike = Union[TFR, FixedTFR]
SINK_CLASS_ID = "SINK"


@dataclass(frozen=True)
class SpeciesDef:
    species_id: str
    common_name: str
    scientific_name: str
    tsn: int | None = None


@dataclass(frozen=True)
class ClassDef:
    class_id: str
    label: str
    species_id: str | None  # None marks the sink class


@dataclass
class ClassTaxonomy:
    """Call-type classes plus the species they roll up to. Exactly one
    sink class; a species may own several call-type classes."""
    classes: list[ClassDef]
    species: list[SpeciesDef]

    def __post_init__(self):
        sinks = [c for c in self.classes if c.species_id is None]
        if len(sinks) != 1:
            raise DataError(f"taxonomy needs exactly one sink class, found {len(sinks)}")
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate class_id in taxonomy")
        known = {s.species_id for s in self.species}
        for c in self.classes:
            if c.species_id is not None and c.species_id not in known:
                raise DataError(f"class {c.class_id!r} references unknown species "
                                f"{c.species_id!r}")

    @property
    def sink_class_id(self) -> str:
        return next(c.class_id for c in self.classes if c.species_id is None)

    @property
    def class_ids(self) -> list[str]:
        return [c.class_id for c in self.classes]

    @property
    def bird_class_ids(self) -> list[str]:
        return [c.class_id for c in self.classes if c.species_id is not None]

    def classes_of_species(self, species_id: str) -> list[str]:
        return [c.class_id for c in self.classes if c.species_id == species_id]

    def to_dict(self) -> dict:
        return {"classes": [{"class_id": c.class_id, "label": c.label,
                             "species_id": c.species_id} for c in self.classes],
                "species": [{"species_id": s.species_id,
                             "common_name": s.common_name,
                             "scientific_name": s.scientific_name,
                             "tsn": s.tsn} for s in self.species]}

    @staticmethod
    def from_dict(d: dict) -> "ClassTaxonomy":
        classes = []
        for c in d["classes"]:
            sid = c.get("species_id")
            if sid == SINK_CLASS_ID:
                sid = None
            classes.append(ClassDef(c["class_id"], c["label"], sid))
        species = [SpeciesDef(s["species_id"], s["common_name"],
                              s["scientific_name"], s.get("tsn"))
                   for s in d.get("species", [])]
        return ClassTaxonomy(classes=classes, species=species)

    @staticmethod
    def from_json_file(path: str) -> "ClassTaxonomy":
        with open(path) as f:
            return ClassTaxonomy.from_dict(json.load(f))

    def to_json_file(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


def sink_weight(n_sink: int, n_per_bird_class: int,
                target_multiple: float = 3.0) -> float:
    """Per-sample sink weight making the sink class count for
    target_multiple bird classes in aggregate."""
    if n_sink <= 0 or n_per_bird_class <= 0:
        raise DataError("counts must be positive")
    return target_multiple * n_per_bird_class / n_sink


def weighted_cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                           weights: torch.Tensor) -> torch.Tensor:
    """Per-sample-weighted CE, normalized by total weight so it reduces
    to plain cross-entropy when every weight is 1."""
    ce = torch.nn.functional.cross_entropy(logits, targets, reduction="none")
    return (weights * ce).sum() / weights.sum()


@dataclass
class ClassifierTrainConfig:
    seed: int
    sets: int = 95
    ce_epochs_per_set: int = 5
    contrastive_epochs_per_set: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    beta: float = 3.0  # contrastive cap weight for the auxiliary epochs
    batch_pairs: int = 512
    sink_multiple: float = 3.0
    head_widths: tuple[int, ...] = (1024, 512, 256)


@dataclass
class ClassifierModel:
    encoder: torch.nn.Module
    embed_head: torch.nn.Module
    dense_head: DenseHead
    taxonomy: ClassTaxonomy
    descriptor: dict
    metadata: dict = field(default_factory=dict)

    @property
    def class_ids(self) -> list[str]:
        return self.taxonomy.class_ids


def new_classifier_model(ae: AeModel, embedder: EmbedderModel,
                         taxonomy: ClassTaxonomy,
                         head_widths=(1024, 512, 256),
                         seed: int = 0) -> ClassifierModel:
    seed_everything(seed)
    n_out = len(taxonomy.classes)
    desc = {"ae": ae.descriptor, "embedder": embedder.descriptor,
            "head_widths": list(head_widths), "n_classes": n_out}
    return ClassifierModel(
        encoder=copy.deepcopy(ae.encoder),
        embed_head=copy.deepcopy(embedder.head),
        dense_head=DenseHead(embedder.descriptor["embed_dim"], head_widths, n_out),
        taxonomy=taxonomy, descriptor=desc,
        metadata={"seed": seed})


def _forward_probs(model: ClassifierModel, x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(model.dense_head(model.embed_head(model.encoder(x))), dim=1)


def classify(tfr: TfrLike | np.ndarray, model: ClassifierModel) -> dict:
    """encode -> embed -> dense head; returns per-class probabilities,
    the argmax class and its probability."""
    probs = classify_batch([tfr], model)[0]
    top = int(np.argmax(probs))
    return {"probs": {cid: float(p) for cid, p in zip(model.class_ids, probs)},
            "top_class": model.class_ids[top],
            "confidence": float(probs[top])}


def classify_batch(tfrs: Sequence[TfrLike | np.ndarray],
                   model: ClassifierModel) -> np.ndarray:
    hw = tuple(model.descriptor["ae"]["input_hw"])
    arrs = []
    for t in tfrs:
        v = t if isinstance(t, np.ndarray) else t.values
        if v.shape != hw:
            raise DataError(f"expected {hw} input, got {v.shape}")
        arrs.append(v)
    x = torch.from_numpy(np.stack(arrs)[:, None].astype(np.float32))
    model.encoder.eval()
    model.embed_head.eval()
    model.dense_head.eval()
    with torch.no_grad():
        probs = _forward_probs(model, x)
    return probs.numpy().astype(np.float64)


def species_scores(probs: Mapping[str, float],
                   taxonomy: ClassTaxonomy) -> dict[str, float]:
    """Species score = max over that species' class probabilities."""
    return {s.species_id: max((probs[c] for c in
                               taxonomy.classes_of_species(s.species_id)),
                              default=0.0)
            for s in taxonomy.species}


def _split_sink(sink_tfrs: Sequence[TfrLike], rng) -> tuple[list, list]:
    """Hold ~10% of sink TFRs out for validation (at least 1 when possible)."""
    n = len(sink_tfrs)
    perm = rng.permutation(n)
    n_val = max(1, n // 10) if n >= 3 else 0
    val = [sink_tfrs[i] for i in perm[:n_val]]
    train = [sink_tfrs[i] for i in perm[n_val:]]
    return train, val


def train_classifier(dataset: Sequence[LabeledSample],
                     taxonomy: ClassTaxonomy,
                     sink_tfrs: Sequence[TfrLike],
                     ae: AeModel,
                     embedder: EmbedderModel,
                     pairs: Sequence[tuple[TfrLike, TfrLike]],
                     tfrs: Mapping[str, TfrLike],
                     cfg: ClassifierTrainConfig) -> ClassifierModel:
    """Alternating fine-tune: each set = cfg.ce_epochs_per_set epochs of
    sink-weighted cross-entropy on the full stack, then
    cfg.contrastive_epochs_per_set epochs of the contrastive loss on the
    encoder+embedder (dense head untouched). No layer is frozen.

    `dataset` must hold a balanced train split of bird classes plus val
    samples; `sink_tfrs` supplies the confuser class; `tfrs` maps every
    sample id to its values.
    """
    if not sink_tfrs:
        raise DataError("sink TFRs are required")
    if not pairs:
        raise DataError("contrastive pairs are required for the auxiliary epochs")
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    bird_ids = set(taxonomy.bird_class_ids)
    sink_id = taxonomy.sink_class_id
    for s in dataset:
        if s.class_id not in bird_ids:
            raise DataError(f"sample {s.tfr_id!r} has class {s.class_id!r} "
                            "not in taxonomy bird classes")
        if s.tfr_id not in tfrs:
            raise DataError(f"no TFR values for sample {s.tfr_id!r}")

    train_bird = [s for s in dataset if s.split == "train"]
    val_bird = [s for s in dataset if s.split == "val"]
    counts: dict[str, int] = {}
    for s in train_bird:
        counts[s.class_id] = counts.get(s.class_id, 0) + 1
    if not counts:
        raise DataError("no train samples")
    if len(set(counts.values())) != 1:
        raise DataError(f"train split is not balanced: {counts}")
    n_per = next(iter(counts.values()))

    sink_train, sink_val = _split_sink(list(sink_tfrs), rng)
    if not sink_train:
        raise DataError("no sink TFRs left for training")
    w_sink = sink_weight(len(sink_train), n_per, cfg.sink_multiple)

    class_index = {cid: i for i, cid in enumerate(taxonomy.class_ids)}
    train_rows = [(tfrs[s.tfr_id], class_index[s.class_id], 1.0) for s in train_bird]
    train_rows += [(t, class_index[sink_id], w_sink) for t in sink_train]
    val_rows = [(tfrs[s.tfr_id], class_index[s.class_id], 1.0) for s in val_bird]
    val_rows += [(t, class_index[sink_id], w_sink) for t in sink_val]

    n_val_pairs = max(1, len(pairs) // 10)
    pperm = rng.permutation(len(pairs))
    val_pairs = [pairs[i] for i in pperm[:n_val_pairs]]
    train_pairs = [pairs[i] for i in pperm[n_val_pairs:]] or list(val_pairs)

    model = new_classifier_model(ae, embedder, taxonomy, cfg.head_widths, cfg.seed)
    params = (list(model.encoder.parameters()) +
              list(model.embed_head.parameters()) +
              list(model.dense_head.parameters()))
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))

    hw = ae.input_hw

    def batch_tensor(rows, seeds):
        vals = np.stack([_values_of(t, s) for (t, _, _), s in zip(rows, seeds)])
        if vals.shape[1:] != tuple(hw):
            raise DataError(f"expected {tuple(hw)} inputs, got {vals.shape[1:]}")
        x = torch.from_numpy(vals[:, None].astype(np.float32))
        y = torch.tensor([r[1] for r in rows], dtype=torch.long)
        w = torch.tensor([r[2] for r in rows], dtype=torch.float32)
        return x, y, w

    def fix_pair(pair, *key):
        a, b = pair
        fa = a if isinstance(a, FixedTFR) else \
            to_fixed(a, _derive_seed(cfg.seed, *key, 0))
        fb = b if isinstance(b, FixedTFR) else \
            to_fixed_near(b, fa, _derive_seed(cfg.seed, *key, 1))
        return fa, fb

    def weighted_ce(x, y, w):
        logits = model.dense_head(model.embed_head(model.encoder(x)))
        return weighted_cross_entropy(logits, y, w)

    def train_mode(flag: bool):
        for m in (model.encoder, model.embed_head, model.dense_head):
            m.train(flag)

    epoch_counter = 0
    per_set = []
    for set_i in range(cfg.sets):
        # primary loss epochs
        for _ in range(cfg.ce_epochs_per_set):
            train_mode(True)
            order = rng.permutation(len(train_rows))
            for b0 in range(0, len(order), cfg.batch_size):
                ridx = order[b0 : b0 + cfg.batch_size]
                if len(ridx) < 2:
                    continue  # BatchNorm needs > 1 sample in train mode
                rows = [train_rows[i] for i in ridx]
                seeds = [_derive_seed(cfg.seed, epoch_counter, int(i)) for i in ridx]
                x, y, w = batch_tensor(rows, seeds)
                loss = weighted_ce(x, y, w)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite cross-entropy in set {set_i}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            epoch_counter += 1
        # auxiliary contrastive epochs: encoder + embedder only
        for _ in range(cfg.contrastive_epochs_per_set):
            train_mode(True)
            order = rng.permutation(len(train_pairs))
            for b0 in range(0, len(order), cfg.batch_pairs):
                pidx = order[b0 : b0 + cfg.batch_pairs]
                if len(pidx) < 2:
                    continue
                flat = []
                for j, pi in enumerate(pidx):
                    fa, fb = fix_pair(train_pairs[pi],
                                      7000 + epoch_counter, int(pi))
                    flat.extend([(fa, 0, 1.0), (fb, 0, 1.0)])
                x, _, _ = batch_tensor(flat, [0] * len(flat))
                z = model.embed_head(model.encoder(x))
                loss = contrastive_loss(z, cfg.beta) / len(pidx)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite contrastive loss in set {set_i}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            epoch_counter += 1

        # per-set validation metrics
        train_mode(False)
        with torch.no_grad():
            seeds = [_derive_seed(cfg.seed, 3, int(i)) for i in range(len(val_rows))]
            xv, yv, wv = batch_tensor(val_rows, seeds)
            val_loss = float(weighted_ce(xv, yv, wv))
            pred = torch.argmax(
                model.dense_head(model.embed_head(model.encoder(xv))), dim=1)
            val_acc = float((pred == yv).float().mean())
            flatv = []
            for j, pair in enumerate(val_pairs):
                fa, fb = fix_pair(pair, 4, j)
                flatv.extend([(fa, 0, 1.0), (fb, 0, 1.0)])
            xp, _, _ = batch_tensor(flatv, [0] * len(flatv))
            paired, unpaired = _pair_stats(model.embed_head(model.encoder(xp)))
        per_set.append({"set": set_i, "val_loss": val_loss, "val_accuracy": val_acc,
                        "val_paired_sim": paired, "val_unpaired_abs_sim": unpaired,
                        "ce_epochs_total": (set_i + 1) * cfg.ce_epochs_per_set,
                        "contrastive_epochs_total":
                            (set_i + 1) * cfg.contrastive_epochs_per_set})

    model.metadata = {"seed": cfg.seed, "sets": cfg.sets,
                      "sink_weight": w_sink, "n_per_bird_class": n_per,
                      "n_sink_train": len(sink_train),
                      "per_set_metrics": per_set}
    return model


def save_classifier(model: ClassifierModel, path: str) -> None:
    tensors = {}
    for prefix, mod in (("encoder.", model.encoder),
                        ("embed_head.", model.embed_head),
                        ("dense_head.", model.dense_head)):
        for k, v in state_to_tensors(mod).items():
            tensors[prefix + k] = v
    meta = dict(model.metadata)
    meta["taxonomy"] = model.taxonomy.to_dict()
    save_checkpoint(path, "classifier", model.descriptor, tensors, meta)


def load_classifier(path: str) -> ClassifierModel:
    kind, desc, tensors, meta = load_checkpoint(path)
    if kind != "classifier":
        raise DataError(f"{path}: checkpoint kind {kind!r}, expected classifier")
    taxonomy = ClassTaxonomy.from_dict(meta.pop("taxonomy"))
    ae = new_ae_model(tuple(desc["ae"]["input_hw"]), tuple(desc["ae"]["channels"]),
                      desc["ae"]["latent_dim"])
    emb = new_embedder_model(desc["embedder"]["latent_dim"],
                             desc["embedder"]["hidden_dim"],
                             desc["embedder"]["embed_dim"])
    model = ClassifierModel(encoder=ae.encoder, embed_head=emb.head,
                            dense_head=DenseHead(desc["embedder"]["embed_dim"],
                                                 desc["head_widths"],
                                                 desc["n_classes"]),
                            taxonomy=taxonomy, descriptor=desc, metadata=meta)
    groups = {"encoder.": model.encoder, "embed_head.": model.embed_head,
              "dense_head.": model.dense_head}
    for prefix, mod in groups.items():
        sub = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        tensors_to_state(mod, sub)
    return model
