"""Generative latent-space enhancement for promptable segmentation, at desk scale."""

__version__ = "0.1.0"
