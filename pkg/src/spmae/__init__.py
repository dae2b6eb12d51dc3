"""Synthetic-image masked-autoencoder pre-training and transfer to audio spectrograms."""

__version__ = "0.1.0"
