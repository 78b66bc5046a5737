"""Diffusion policies over action chunks, from tensors to closed-loop eval."""

__version__ = "0.1.0"
