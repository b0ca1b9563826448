"""Semi-supervised bioacoustic call extraction, embedding, and classification."""

__version__ = "0.1.0"

CONFIG_SCHEMA_VERSION = 1
