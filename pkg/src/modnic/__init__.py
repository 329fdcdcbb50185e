"""Continuous-bit-rate toy image codec with a lambda-conditioned latent modulation network."""

__version__ = "0.1.0"
