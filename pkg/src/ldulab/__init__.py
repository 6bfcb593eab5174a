"""Desk-scale lab for trajectory-shifted latent perturbations that make samples unlearnable.

A small diffusion model is trained on procedural data; a perturbation net shifts
the inverted latents of an identity's samples so that few-step denoising emits
imperceptibly changed samples on which textual-inversion-style personalization
fails.
"""

__version__ = "0.1.0"
