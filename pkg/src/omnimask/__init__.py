"""Masked-diffusion omnimodal modeling over a unified discrete token space."""

__version__ = "0.1.0"
