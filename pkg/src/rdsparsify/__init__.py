"""Sparsification of reaction-diffusion networks under dynamic and spectral constraints."""

__version__ = "0.1.0"
