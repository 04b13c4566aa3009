"""Music structure boundary detection with triplet-loss audio embeddings."""

__version__ = "0.1.0"
