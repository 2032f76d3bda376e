"""Desk-scale cascaded ultra-high-resolution video generation.

Stages: a flow-matching transformer generates low-resolution latents, a
latent upsampler lifts them to a larger grid, and the same transformer
refines the result with two frequency-gated LoRA experts.
"""

__version__ = "0.1.0"
