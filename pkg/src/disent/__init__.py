"""Disentangled representation learning: VAE variants, FactorVAE training,
disentanglement metrics, and a sweep runner over a procedural shapes dataset."""

__version__ = "0.1.0"
