"""stemforge: desk-scale multi-track latent diffusion with curriculum
training, guided sampling, and a human-in-the-loop composition service."""

__version__ = "0.1.0"
