"""Diffusion-augmented hierarchical variational forecaster for multi-step
stock returns, with a mean-variance portfolio stage on top."""

__version__ = "0.1.0"
