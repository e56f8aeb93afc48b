"""Motion-subspace representation alignment for a toy latent video diffusion model."""

__version__ = "0.1.0"
