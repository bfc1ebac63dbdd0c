"""Adaptive non-uniform timestep sampling for diffusion-model training, at desk scale."""

__version__ = "0.1.0"
