"""Diffusion-purification robustification for unrolled MRI reconstruction, desk scale."""

__version__ = "0.1.0"
