"""Exemplar diffusion: known boxes injected into diffusion-based detection sampling."""

__version__ = "0.1.0"
