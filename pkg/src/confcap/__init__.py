"""Confidence-scored captioning of toy audio clips, staged corpus refinement,
and a quality-conditioned latent diffusion generator."""

__version__ = "0.1.0"
