from .autoencoder import AeModel, decode, encode, train_autoencoder
from .birdpass import BirdPassModel, train_bird_pass
from .classifier import ClassifierModel, classify, sink_weight, train_classifier
from .embedder import (
    EmbedderModel,
    contrastive_loss,
    embed,
    similarity,
    train_embedder,
)

__all__ = [
    "AeModel", "encode", "decode", "train_autoencoder",
    "EmbedderModel", "embed", "similarity", "contrastive_loss", "train_embedder",
    "ClassifierModel", "classify", "sink_weight", "train_classifier",
    "BirdPassModel", "train_bird_pass",
]
