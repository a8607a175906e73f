"""Upsampling autoencoder for self-supervised point-cloud representation learning."""

__version__ = "0.1.0"
