"""Adversarially trained uncertainty-autoencoder privatizer with multi-adversary evaluation."""

__version__ = "0.1.0"
