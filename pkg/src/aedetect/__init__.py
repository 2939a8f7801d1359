"""Adversarial-example detection from per-layer autoencoder features."""

__version__ = "0.1.0"
