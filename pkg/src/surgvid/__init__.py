"""Phase-conditioned latent video diffusion for laparoscopic surgery clips."""

__version__ = "0.1.0"
