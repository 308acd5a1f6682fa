"""Continual self-supervised masked-autoencoder pretraining (CoSMAE) on numpy."""

__version__ = "0.1.0"
