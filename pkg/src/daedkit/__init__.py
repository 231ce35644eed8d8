"""Desk-scale diffusion models split into a denoising auto-encoder and a diffusion generator."""

__version__ = "0.1.0"
